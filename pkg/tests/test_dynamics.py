import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfglab.dynamics import (SDESpec, cnf_integrate, eta_log_density_fn, eta_score_fn, noised_target, ou_perturb,
                             particle_normals, probability_flow_simulate, reverse_sde_simulate)
from mfglab.errors import ConfigError, DivergedSimulationError, DomainError
from mfglab.targets import checkerboard, gaussian, gaussian_mixture, log_density, sample


@given(st.floats(0.0, 2.0), st.floats(-1.0, 1.0), st.floats(0.2, 2.0), st.floats(0.0, 3.0))
def test_transition_matches_moment_odes(a, b, sigma, s):
    spec = SDESpec(a, b, sigma, 3.0, 1)
    m, c, v = (float(q) for q in spec.transition(jnp.asarray(s)))
    # mean x' = -a x - b, variance v' = -2 a v + sigma^2, integrated by RK4
    n = 2000
    h = s / n
    mx, vx, x0 = 0.7, 0.0, 0.7
    for _ in range(n):
        f = lambda y: np.array([-a * y[0] - b, -2 * a * y[1] + sigma**2])
        y = np.array([mx, vx])
        k1 = f(y); k2 = f(y + h / 2 * k1); k3 = f(y + h / 2 * k2); k4 = f(y + h * k3)
        mx, vx = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert m * x0 + c == pytest.approx(mx, abs=1e-9)
    assert v == pytest.approx(vx, abs=1e-9)


def test_noised_samples_follow_the_closed_form_law():
    spec = SDESpec.ou(d=2)
    t = gaussian([1.0, -0.5], 0.25)
    out = ou_perturb(spec, sample(t, 40000, 0), 0.8, rng_seed=1).states
    law = noised_target(spec, t, 0.8)
    np.testing.assert_allclose(out.mean(0), law.mean, atol=0.02)
    np.testing.assert_allclose(np.cov(out.T), law.cov, atol=0.02)
    with pytest.raises(DomainError):
        ou_perturb(spec, sample(t, 5, 0), 4.0, rng_seed=1)


def test_eta_matches_mixture_density_and_its_gradient():
    spec = SDESpec.ou(d=2)
    t = gaussian_mixture([[0.0, 0.0], [1.0, 1.0]], [0.2, 0.4])
    y, s = np.array([0.3, -0.4]), 0.6
    assert float(eta_log_density_fn(spec, t)(jnp.asarray(y), s)) == pytest.approx(
        float(log_density(noised_target(spec, t, s), y)), rel=1e-12)
    lp = lambda z: float(eta_log_density_fn(spec, t)(jnp.asarray(z), s))
    fd = [(lp(y + 1e-6 * e) - lp(y - 1e-6 * e)) / 2e-6 for e in np.eye(2)]
    np.testing.assert_allclose(eta_score_fn(spec, t)(jnp.asarray(y), s), fd, rtol=1e-6)


def test_checkerboard_eta_is_a_normalized_density():
    spec = SDESpec.ou(d=2)
    lp = jax.jit(jax.vmap(eta_log_density_fn(spec, checkerboard()), in_axes=(0, None)))
    g = np.linspace(-5, 5, 301)
    X, Y = np.meshgrid(g, g)
    mass = np.exp(lp(jnp.asarray(np.column_stack([X.ravel(), Y.ravel()])), 0.2)).sum() * (g[1] - g[0]) ** 2
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_particle_normals_do_not_depend_on_sharding():
    key = jax.random.PRNGKey(3)
    full = particle_normals(key, jnp.arange(10), 5, 2)
    parts = jnp.concatenate([particle_normals(key, jnp.arange(0, 4), 5, 2),
                             particle_normals(key, jnp.arange(4, 10), 5, 2)])
    np.testing.assert_array_equal(full, parts)
    z = np.asarray(particle_normals(key, jnp.arange(200000), 0, 1)).ravel()
    assert abs(z.mean()) < 0.01 and abs(z.var() - 1) < 0.01


def test_reverse_sde_and_flow_with_exact_score_recover_a_gaussian():
    spec = SDESpec.ou(d=2)
    t = gaussian([0.5, -0.5], 0.25)
    score = eta_score_fn(spec, t)
    # start from the exact noised law; the default stationary start is off by e^{-aT}
    x_T = sample(noised_target(spec, t, spec.T), 4000, 7).states
    sde = reverse_sde_simulate(spec, score, 4000, 0.01, 0, x_init=x_T).states
    flow = probability_flow_simulate(spec, score, 4000, 0.01, 0, x_init=x_T).states
    for x in (sde, flow):
        np.testing.assert_allclose(x.mean(0), t.mean, atol=0.04)
        np.testing.assert_allclose(np.cov(x.T), t.cov, atol=0.04)


def test_sharded_reverse_sde_reproduces_the_full_run():
    spec = SDESpec.ou(d=2)
    score = eta_score_fn(spec, gaussian([0.0, 0.0], 0.5))
    full = reverse_sde_simulate(spec, score, 6, 0.1, 4).states
    a = reverse_sde_simulate(spec, score, 2, 0.1, 4).states
    b = reverse_sde_simulate(spec, score, 4, 0.1, 4, offset=2).states
    np.testing.assert_array_equal(full, np.concatenate([a, b]))


def test_recording_and_divergence_reporting():
    spec = SDESpec.ou(d=1, T=1.0)
    ens, (times, states) = reverse_sde_simulate(spec, lambda x, s: -x, 3, 0.1, 0, record_every=5)
    np.testing.assert_allclose(times, [0.5, 1.0])
    np.testing.assert_array_equal(states[-1], ens.states)
    with pytest.raises(DivergedSimulationError) as err:
        reverse_sde_simulate(spec, lambda x, s: 1e200 * x**3, 3, 0.1, 0)
    assert err.value.step is not None
    with pytest.raises(ConfigError):
        reverse_sde_simulate(spec, lambda x, s: -x, 3, 0.3, 0)


def test_cnf_integration_of_a_linear_potential_flow():
    # U = -k |x|^2 / 2 gives v = k x, so x(T) = e^{kT} x0 and div v = 2k
    k = 0.4
    U = lambda x, t: -0.5 * k * jnp.sum(x * x)
    x0 = np.array([[1.0, -2.0], [0.5, 0.0]])
    x1, acc = cnf_integrate(U, x0, "forward", 0.01, 1.0)
    np.testing.assert_allclose(x1, np.exp(k) * x0, rtol=1e-9)
    np.testing.assert_allclose(acc, 2 * k, rtol=1e-9)
    back, acc_b = cnf_integrate(U, x1, "reverse", 0.01, 1.0)
    np.testing.assert_allclose(back, x0, rtol=1e-9)
    np.testing.assert_allclose(acc_b, -2 * k, rtol=1e-9)
    with pytest.raises(ConfigError):
        cnf_integrate(U, x0, "sideways")
