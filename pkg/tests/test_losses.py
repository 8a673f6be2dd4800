import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfglab.autodiff import affine_mlp, init_mlp, param_grad, ravel
from mfglab.dynamics import SDESpec, eta_log_density_fn, eta_score_fn
from mfglab.errors import ConfigError, IllPosedHamiltonianError, ShapeError, UnsupportedError
from mfglab.losses import (MFGIngredients, RegularizerConfig, bounded_flow_ingredients, bounded_velocity_regularizer,
                           cnf_ingredients, esm_loss, esm_samples, hamiltonian, hjb_r1, hjb_r2, ism_samples,
                           legendre_sup, ot_flow_ingredients, otbg_objective, otflow_objective,
                           prob_flow_ingredients, r1_residual, r2_residual, sgm_ingredients, sgm_objective,
                           terminal_score_terms, velocity_grid)
from mfglab.targets import checkerboard, gaussian, gaussian_mixture, jnp_log_density_fn, sample

SPEC = SDESpec.ou(d=2)
MIX = gaussian_mixture([[0.5, 0.0], [-1.0, 1.0]], [0.3, 0.5], [0.3, 0.7])


def points(n=32, seed=0):
    rng = np.random.default_rng(seed)
    return jnp.asarray(rng.normal(size=(n, 2))), jnp.asarray(rng.uniform(0.05, 3.0, n))


def test_exact_score_solves_the_gradient_hjb():
    y, s = points()
    res = r1_residual(eta_score_fn(SPEC, MIX), SPEC, y, s)
    assert float(jnp.max(jnp.abs(res))) < 1e-10


def test_exact_log_density_solves_the_scalar_hjb():
    y, s = points()
    lp = eta_log_density_fn(SPEC, MIX)
    res = r2_residual(lambda x, t: lp(x, t)[None], SPEC, y, s)
    assert float(jnp.max(jnp.abs(res))) < 1e-10


def test_scalar_hjb_of_a_zero_potential_is_minus_div_drift():
    y, s = points()
    res = r2_residual(lambda x, t: jnp.zeros(1), SPEC, y, s)
    np.testing.assert_allclose(res, -SPEC.div_drift)
    cfg = RegularizerConfig(alpha0=0, alpha1=1, p=2)
    data = sample(gaussian([0.0, 0.0], 1.0), 16, 0)
    assert hjb_r2(lambda x, t: jnp.zeros(1), SPEC, data, cfg) == pytest.approx(SPEC.T * SPEC.div_drift**2)


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_terminal_term_of_a_linear_score(entries):
    A = np.asarray(entries).reshape(2, 2)
    x = np.random.default_rng(0).normal(size=(5, 2))
    got = terminal_score_terms(affine_mlp(A), jnp.asarray(x))
    np.testing.assert_allclose(got, np.sum((x @ A.T) ** 2, 1) + 2 * np.trace(A), rtol=1e-10, atol=1e-10)


def test_implicit_and_explicit_matching_differ_by_a_constant():
    # paired over the same draws, the net-to-net change of ESM equals that of ISM
    t = gaussian([0.0, 0.0], 0.25)
    data = sample(t, 20000, 3)
    a, b = init_mlp(2, 2, width=16, seed=1), init_mlp(2, 2, width=16, seed=2)
    d_ism = ism_samples(a, data, rng_seed=4) - ism_samples(b, data, rng_seed=4)
    d_esm = esm_samples(a, t, data, rng_seed=4) - esm_samples(b, t, data, rng_seed=4)
    diff = d_esm - d_ism
    assert abs(diff.mean()) <= 4 * diff.std(ddof=1) / np.sqrt(diff.size)


def test_esm_rejects_the_checkerboard():
    with pytest.raises(UnsupportedError):
        esm_loss(init_mlp(2, 2, width=4), checkerboard(), sample(checkerboard(), 4, 0).states)


def test_regularizer_config_validation():
    with pytest.raises(ConfigError):
        RegularizerConfig(alpha0=0, alpha1=0, alpha2=0)
    with pytest.raises(ConfigError):
        RegularizerConfig(p=3)
    with pytest.raises(ConfigError):
        RegularizerConfig(alpha1=-1)
    with pytest.raises(ShapeError):
        hjb_r1(init_mlp(2, 1, width=4), SPEC, np.zeros((4, 2)), RegularizerConfig(alpha1=1))


@pytest.mark.parametrize("p", [1, 2])
def test_regularized_objective_gradient_matches_finite_differences(p):
    net = init_mlp(2, 2, width=8, seed=3)
    rng = np.random.default_rng(5)
    x0, s, z = (jnp.asarray(a) for a in (rng.normal(size=(8, 2)), rng.uniform(0, 3, 8), rng.normal(size=(8, 2))))
    cfg = RegularizerConfig(alpha0=1, alpha1=0.5, alpha2=0.2, p=p)
    loss = lambda q: sgm_objective(q, SPEC, cfg, x0, s, z)
    flat, unravel = ravel(net)
    g = ravel(param_grad(loss, net))[0]
    for i in (0, 11, 40, flat.size - 1):
        e = np.zeros(flat.size)
        e[i] = 1e-6
        fd = (loss(unravel(flat + e)) - loss(unravel(flat - e))) / 2e-6
        assert float(g[i]) == pytest.approx(float(fd), rel=1e-4, abs=1e-7)


def test_uniform_measure_points_fill_the_box():
    cfg = RegularizerConfig(alpha1=1, measure="uniform", box=4.0)
    data = sample(gaussian([0.0, 0.0], 1.0), 2000, 0)
    # the residual only sees points; a zero network makes the loss independent of them
    assert hjb_r1(lambda x, t: jnp.zeros(2), SPEC, data, cfg) == 0.0
    from mfglab.losses import residual_points
    rng = np.random.default_rng(0)
    pts = residual_points(SPEC, cfg, None, None, jnp.asarray(rng.normal(size=(20000, 2))))
    assert float(jnp.max(jnp.abs(pts))) < 4.0
    assert float(jnp.mean(jnp.abs(pts))) == pytest.approx(2.0, abs=0.05)


# ---------------------------------------------------------------- CNF objectives

def test_otflow_with_zero_potential_is_the_reference_nll():
    x = np.random.default_rng(0).normal(size=(10, 2))
    expect = np.mean(0.5 * np.sum(x * x, 1) + np.log(2 * np.pi))
    assert otflow_objective(lambda y, t: jnp.zeros(1), x, alpha1=1.0) == pytest.approx(expect, rel=1e-12)


def test_otflow_on_a_linear_contraction_matches_the_closed_form():
    # U = -k|x|^2/2 is time independent: v = k x, transport k^2 |x0|^2 (e^{2k}-1)/(4k)
    k = -0.3
    U = lambda y, t: (-0.5 * k * jnp.sum(y * y))[None]
    x = np.random.default_rng(1).normal(size=(50, 2))
    z = np.exp(k) * x
    nll = 0.5 * np.sum(z * z, 1) + np.log(2 * np.pi) - 2 * k
    kin = k**2 * np.sum(x * x, 1) * (np.exp(2 * k) - 1) / (4 * k)
    got = otflow_objective(U, x, alpha1=0.0, dt=0.01)
    assert got == pytest.approx(np.mean(nll + kin), rel=1e-8)


def test_otbg_lambda_endpoints_and_terms():
    t = gaussian([0.0, 0.0], 1.0)
    logpi = jnp_log_density_fn(t)
    zero = lambda y, s: jnp.zeros(1)
    x = sample(t, 200, 0).states
    # with U = 0 the model is the reference, which equals the target: both KLs vanish exactly
    total, terms = otbg_objective(zero, x, 0.5, logpi, return_terms=True)
    assert total == pytest.approx(0.0, abs=1e-12)
    assert terms["forward_kl"] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConfigError):
        otbg_objective(zero, x, 1.5, logpi)


def test_bounded_velocity_regularizer_vanishes_on_its_hjb_solution():
    # U = c t + x.e with |e| = 1 has dU/dt = c |grad U|
    c = 1.7
    e = np.array([0.6, 0.8])
    U = lambda y, t: (c * t + y @ e)[None]
    x = np.random.default_rng(0).normal(size=(20, 2))
    assert bounded_velocity_regularizer(U, x, 0.3, c, alpha1=1.0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConfigError):
        bounded_velocity_regularizer(U, x, 0.3, c, alpha1=1.0, alpha2=1.0)


# ---------------------------------------------------------------- Hamiltonians

@pytest.mark.parametrize("make", [ot_flow_ingredients, lambda: sgm_ingredients(SPEC),
                                  lambda: prob_flow_ingredients(SPEC), lambda: bounded_flow_ingredients(1.3)])
def test_closed_form_hamiltonians_match_the_grid_supremum(make):
    ing = make()
    rng = np.random.default_rng(2)
    for _ in range(5):
        x, p = rng.normal(size=2), rng.normal(size=2)
        _, tol = velocity_grid(ing, p)
        gap = hamiltonian(ing, x, p) - legendre_sup(ing, x, p)
        assert -1e-9 <= gap <= tol


def test_zero_cost_on_unbounded_velocities_is_ill_posed():
    ing = cnf_ingredients()
    with pytest.raises(IllPosedHamiltonianError):
        hamiltonian(ing, np.zeros(2), np.ones(2))
    with pytest.raises(IllPosedHamiltonianError):
        legendre_sup(ing, np.zeros(2), np.array([0.3, -0.2]))


def test_inconsistent_ingredients_are_rejected():
    with pytest.raises(ConfigError):
        MFGIngredients("x", "kl", "none", "kinetic", "ODE", "bounded_velocity")
    with pytest.raises(ConfigError):
        MFGIngredients("x", "kl", "none", "sgm", "SDE", "sgm")
