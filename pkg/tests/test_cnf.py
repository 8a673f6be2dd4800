import jax.numpy as jnp
import numpy as np
import pytest

from mfglab.cnf import (CNFRun, cnf_loss_fn, generate_cnf, init_potential, log_likelihood, path_curvature,
                        roundtrip_error, train_cnf)
from mfglab.errors import ConfigError, UnsupportedError
from mfglab.losses import std_normal_logpdf
from mfglab.targets import checkerboard, gaussian, sample

TARGET = gaussian([0.0, 0.0], 0.25)


def test_zero_output_init_gives_the_identity_flow():
    U = init_potential(CNFRun(), 2)
    x = sample(TARGET, 20, 0).states
    np.testing.assert_allclose(log_likelihood(U, x), np.asarray(std_normal_logpdf(jnp.asarray(x))), atol=1e-14)
    assert path_curvature(U, x) == 0.0


def test_linear_flow_likelihood_and_roundtrip():
    # U = -k|x|^2/2 maps N(0, e^{-2k} I) data onto the standard normal at T = 1
    k = np.log(2.0)
    U = lambda y, t: (-0.5 * k * jnp.sum(y * y))[None]
    data = sample(gaussian([0.0, 0.0], 0.25), 50, 1).states
    ll = log_likelihood(U, data)
    np.testing.assert_allclose(ll, np.asarray(std_normal_logpdf(jnp.asarray(2 * data))) + 2 * k, rtol=1e-9)
    assert roundtrip_error(U, data) < 1e-12
    ens, gen_ll = generate_cnf(U, 2000, rng_seed=3, d=2)
    assert np.cov(ens.states.T) == pytest.approx(0.25 * np.eye(2), abs=0.03)
    # exact path x0 e^{kt}: second differences of a straight but accelerating path
    path = data[None] * np.exp(k * np.linspace(0.0, 1.0, 101))[:, None, None]
    d2 = path[2:] - 2 * path[1:-1] + path[:-2]
    assert path_curvature(U, data) == pytest.approx(np.mean(np.linalg.norm(d2, axis=-1).sum(0)), rel=1e-6)


def test_short_training_improves_the_objective():
    run = CNFRun(batches=200, batch_size=32, dt=0.25, transport_weight=0.05, width=16, lr=3e-3, eval_every=50)
    _, trace = train_cnf(run, TARGET)
    assert trace[-1][1] < trace[0][1]


def test_boltzmann_objectives_need_a_smooth_target():
    with pytest.raises(UnsupportedError):
        cnf_loss_fn(CNFRun(objective="ot_bg"), checkerboard())
    assert CNFRun(objective="generalized_ot", lam=0.7).effective_lam == 0.0


def test_run_validation():
    with pytest.raises(ConfigError):
        CNFRun(dt=0.3)
    with pytest.raises(ConfigError):
        CNFRun(objective="realnvp")
    with pytest.raises(ConfigError):
        CNFRun(lam=2.0)
    with pytest.raises(ConfigError):
        generate_cnf(lambda y, t: jnp.zeros(1), 5)
