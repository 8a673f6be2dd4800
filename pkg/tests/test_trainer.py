import jax.numpy as jnp
import numpy as np
import pytest

from mfglab.autodiff import ravel
from mfglab.dynamics import SDESpec
from mfglab.errors import ConfigError, DivergedTrainingError, ShapeError
from mfglab.losses import RegularizerConfig
from mfglab.targets import gaussian
from mfglab.trainer import (TrainConfig, adam_init, adam_step, init_network, load_training_checkpoint, optimize,
                            read_loss_trace, train, write_loss_trace)

SPEC = SDESpec.ou(d=2)
TARGET = gaussian([0.0, 0.0], 0.25)


def test_adam_first_step_moves_each_coordinate_by_the_learning_rate():
    params = {"w": jnp.array([1.0, -2.0, 3.0])}
    grads = {"w": jnp.array([0.5, -4.0, 1e-3])}
    new, state = adam_step(params, grads, adam_init(params), 0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.sign(grads["w"]), rtol=1e-4)
    assert int(state.step) == 1
    with pytest.raises(ShapeError):
        adam_step(params, {"v": grads["w"]}, state, 0.1)


def test_optimize_minimizes_a_quadratic():
    target = jnp.array([1.0, -2.0])
    loss = lambda p, b: jnp.sum((p["x"] - target - b["shift"]) ** 2)
    res = optimize(loss, {"x": jnp.zeros(2)}, lambda k: {"shift": np.zeros(2)}, 3000, 0.05, chunk=700)
    np.testing.assert_allclose(res.params["x"], target, atol=1e-3)
    assert res.steps_done == 3000


def test_divergence_stops_with_a_checkpoint():
    loss = lambda p, b: jnp.log(p["x"][0]) * b["c"]
    # the step walks x below zero, where log is NaN
    with pytest.raises(DivergedTrainingError) as err:
        optimize(loss, {"x": jnp.array([0.05])}, lambda k: {"c": np.array(1.0)}, 200, 0.1)
    params, _, step = err.value.checkpoint
    assert step == err.value.step and np.isfinite(float(params["x"][0]))


def test_training_is_deterministic_and_resumable(tmp_path):
    cfg = TrainConfig(batches=40, batch_size=16, seed=3, width=8, chunk=7, eval_every=5,
                      reg=RegularizerConfig(alpha0=1, alpha1=0.1, alpha2=0.1))
    full, trace = train(cfg, TARGET, SPEC)
    again, trace2 = train(cfg, TARGET, SPEC)
    assert trace == trace2
    np.testing.assert_array_equal(ravel(full)[0], ravel(again)[0])
    half = TrainConfig(**{**cfg.__dict__, "batches": 25})
    train(half, TARGET, SPEC, checkpoint_path=tmp_path / "ck.npz")
    resumed, _ = train(cfg, TARGET, SPEC, resume_from=tmp_path / "ck.npz")
    np.testing.assert_allclose(ravel(resumed)[0], ravel(full)[0], rtol=1e-12, atol=1e-14)
    _, opt, steps, header = load_training_checkpoint(tmp_path / "ck.npz")
    assert steps == 25 and int(opt.step) == 25 and header["train_config"]["batch_size"] == 16


def test_zero_batches_returns_the_initial_network():
    cfg = TrainConfig(batches=0, width=8)
    params, trace = train(cfg, TARGET, SPEC)
    np.testing.assert_array_equal(ravel(params)[0], ravel(init_network(cfg, SPEC))[0])
    assert trace == []


def test_config_and_dimension_errors():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(objective="dsm")
    with pytest.raises(ConfigError):
        train(TrainConfig(batches=1), gaussian([0.0], 1.0), SPEC)


def test_loss_trace_roundtrip(tmp_path):
    trace = [(0, 1.5), (100, 0.1234567890123)]
    assert read_loss_trace(write_loss_trace(tmp_path / "t.csv", trace)) == trace
