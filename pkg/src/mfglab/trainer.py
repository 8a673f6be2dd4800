"""Adam optimization loop with counter-based batches and checkpoints.

Batch ``k`` of a run with seed ``seed`` is drawn from
``numpy.random.default_rng([seed, k])``, so any batch can be regenerated
without replaying earlier ones and a resumed run sees the same data as an
uninterrupted one.  Steps are executed in jitted chunks with ``lax.scan``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from .autodiff import MLPParams, init_mlp, load_checkpoint, save_checkpoint
from .dynamics import SDESpec, eta_score_fn, perturb
from .errors import ConfigError, DivergedTrainingError, ShapeError, UnsupportedError
from .losses import RegularizerConfig, esm_terms, sgm_objective
from .targets import TargetDistribution, draw

OBJECTIVES = ("sgm", "sgm_scalar", "esm")


@dataclass(frozen=True)
class TrainConfig:
    """``objective``: ``sgm`` (ISM on a vector score plus the gradient-HJB
    regularizer), ``sgm_scalar`` (log-density network with the scalar HJB
    regularizer) or ``esm`` (explicit matching against the exact score)."""

    batches: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    objective: str = "sgm"
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    hidden: int = 2
    width: int = 32
    activation: str = "gelu"
    eval_every: int = 100
    chunk: int = 500
    clip_norm: Optional[float] = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batches < 0:
            raise ConfigError("batches must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.eval_every < 1 or self.chunk < 1:
            raise ConfigError("eval_every and chunk must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")


# ---------------------------------------------------------------- Adam

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class AdamState(NamedTuple):
    m: object
    v: object
    step: jnp.ndarray


def adam_init(params) -> AdamState:
    zeros = jax.tree.map(jnp.zeros_like, params)
    return AdamState(zeros, jax.tree.map(jnp.zeros_like, params), jnp.asarray(0, dtype=jnp.int64))


def _adam_update(params, grads, state: AdamState, lr):
    step = state.step + 1
    m = jax.tree.map(lambda a, g: BETA1 * a + (1 - BETA1) * g, state.m, grads)
    v = jax.tree.map(lambda a, g: BETA2 * a + (1 - BETA2) * g * g, state.v, grads)
    c1 = 1 - BETA1 ** step.astype(jnp.float64)
    c2 = 1 - BETA2 ** step.astype(jnp.float64)
    new = jax.tree.map(lambda p, a, b: p - lr * (a / c1) / (jnp.sqrt(b / c2) + EPS), params, m, v)
    return new, AdamState(m, v, step)


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update with ``(0.9, 0.999, 1e-8)``."""
    p_def, g_def = jax.tree.structure(params), jax.tree.structure(grads)
    if p_def != g_def or jax.tree.structure(state.m) != p_def:
        raise ShapeError("gradient/optimizer state structure does not match parameters")
    for a, b, c in zip(jax.tree.leaves(params), jax.tree.leaves(grads), jax.tree.leaves(state.m)):
        if jnp.shape(a) != jnp.shape(b) or jnp.shape(a) != jnp.shape(c):
            raise ShapeError(f"shape mismatch {jnp.shape(a)} vs {jnp.shape(b)}")
    return _adam_update(params, grads, state, lr)


def _clip(grads, max_norm):
    norm = jnp.sqrt(sum(jnp.sum(g * g) for g in jax.tree.leaves(grads)))
    scale = jnp.minimum(1.0, max_norm / (norm + 1e-12))
    return jax.tree.map(lambda g: g * scale, grads)


# ---------------------------------------------------------------- generic loop

@dataclass
class TrainResult:
    params: MLPParams
    trace: list  # (batch index, loss)
    opt_state: AdamState
    steps_done: int


def _make_chunk_runner(loss_fn, lr, clip_norm):
    """Jitted scan over a chunk of batches.

    After the first non-finite loss the carry stops updating, so the
    returned parameters are the last finite ones and ``bad`` is the offset
    of the offending batch inside the chunk (``-1`` if none).
    """
    vg = jax.value_and_grad(loss_fn)

    def body(carry, batch):
        params, opt, bad, i = carry
        loss, g = vg(params, batch)
        if clip_norm is not None:
            g = _clip(g, clip_norm)
        ok = jnp.isfinite(loss) & (bad < 0)
        for leaf in jax.tree.leaves(g):
            ok = ok & jnp.all(jnp.isfinite(leaf))
        new_p, new_o = _adam_update(params, g, opt, lr)
        params = jax.tree.map(lambda a, b: jnp.where(ok, a, b), new_p, params)
        opt = jax.tree.map(lambda a, b: jnp.where(ok, a, b), new_o, opt)
        bad = jnp.where((bad < 0) & ~ok, i, bad)
        return (params, opt, bad, i + 1), loss

    @jax.jit
    def run(params, opt, batches):
        carry = (params, opt, jnp.asarray(-1), jnp.asarray(0))
        (params, opt, bad, _), losses = jax.lax.scan(body, carry, batches)
        return params, opt, bad, losses

    return run


def optimize(loss_fn: Callable, params, make_batch: Callable[[int], dict], batches: int, lr: float,
             eval_every: int = 100, chunk: int = 500, clip_norm=None, opt_state: Optional[AdamState] = None,
             start: int = 0, checkpoint: Optional[Callable] = None, checkpoint_every: int = 0) -> TrainResult:
    """Minimize ``loss_fn(params, batch)`` over batches ``start, ..., batches-1``.

    ``make_batch(k)`` returns a dict of numpy arrays for batch ``k``.
    ``checkpoint(params, opt_state, steps_done)`` is called every
    ``checkpoint_every`` batches and at the end.
    """
    opt = adam_init(params) if opt_state is None else opt_state
    trace = []
    run = _make_chunk_runner(loss_fn, lr, clip_norm)
    k = start
    if checkpoint_every:
        chunk = min(chunk, checkpoint_every)
    while k < batches:
        n = min(chunk, batches - k)
        if checkpoint_every:
            n = min(n, checkpoint_every - k % checkpoint_every)
        items = [make_batch(j) for j in range(k, k + n)]
        stacked = {key: jnp.asarray(np.stack([it[key] for it in items])) for key in items[0]}
        params, opt, bad, losses = run(params, opt, stacked)
        losses = np.asarray(losses)
        bad = int(bad)
        if bad >= 0:
            ck = checkpoint(params, opt, k + bad) if checkpoint else None
            ck = ck if ck is not None else (params, opt, k + bad)
            raise DivergedTrainingError(f"non-finite loss at batch {k + bad}", step=k + bad, checkpoint=ck)
        for j in range(n):
            if (k + j) % eval_every == 0:
                trace.append((k + j, float(losses[j])))
        k += n
        if checkpoint and checkpoint_every and k % checkpoint_every == 0 and k < batches:
            checkpoint(params, opt, k)
    if checkpoint:
        checkpoint(params, opt, k)
    return TrainResult(params, trace, opt, k)


# ---------------------------------------------------------------- score models

def sgm_batch_fn(target: TargetDistribution, spec: SDESpec, seed: int, batch_size: int):
    def make(k):
        rng = np.random.default_rng([seed, k])
        x0 = draw(target, batch_size, rng)
        s = rng.uniform(0.0, spec.T, batch_size)
        z = rng.standard_normal((batch_size, spec.d))
        return {"x0": x0, "s": s, "z": z}

    return make


def sgm_loss_fn(cfg: TrainConfig, spec: SDESpec, target: TargetDistribution):
    if cfg.objective == "esm":
        if not target.has_score:
            raise UnsupportedError("explicit score matching needs a target with an analytic score")
        score = eta_score_fn(spec, target)

        def loss(params, b):
            y = perturb(spec, b["x0"], b["s"], b["z"])
            return jnp.mean(esm_terms(params, score, spec, y, b["s"]))

        return loss
    scalar = cfg.objective == "sgm_scalar"
    return lambda params, b: sgm_objective(params, spec, cfg.reg, b["x0"], b["s"], b["z"], scalar=scalar)


def init_network(cfg: TrainConfig, spec: SDESpec) -> MLPParams:
    d_out = 1 if cfg.objective == "sgm_scalar" else spec.d
    return init_mlp(spec.d, d_out, cfg.hidden, cfg.width, cfg.activation, cfg.seed)


def config_header(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def save_training_checkpoint(path, params, opt: AdamState, steps_done: int, cfg: Optional[TrainConfig] = None):
    flat_m = ravel_pytree(opt.m)[0]
    flat_v = ravel_pytree(opt.v)[0]
    extra = {"steps_done": int(steps_done), "adam_step": int(opt.step)}
    if cfg is not None:
        extra["train_config"] = config_header(cfg)
    return save_checkpoint(path, params, extra, {"adam_m": flat_m, "adam_v": flat_v})


def load_training_checkpoint(path):
    """``(params, AdamState or None, steps_done, header)``."""
    params, header, extras = load_checkpoint(path, with_extras=True)
    opt = None
    if "adam_m" in extras:
        _, unravel = ravel_pytree(params)
        opt = AdamState(unravel(jnp.asarray(extras["adam_m"])), unravel(jnp.asarray(extras["adam_v"])),
                        jnp.asarray(header.get("adam_step", 0), dtype=jnp.int64))
    return params, opt, int(header.get("steps_done", 0)), header


def train(cfg: TrainConfig, target: TargetDistribution, spec: SDESpec, init: Optional[MLPParams] = None,
          checkpoint_path=None, resume_from=None):
    """Train a score (or log-density) network; returns ``(params, trace)``.

    ``trace`` lists ``(batch index, batch loss)`` every ``eval_every``
    batches.  With ``resume_from`` the run continues from a checkpoint
    written by an earlier call with the same config.
    """
    if target.d != spec.d:
        raise ConfigError(f"target dimension {target.d} does not match spec.d={spec.d}")
    params = init if init is not None else init_network(cfg, spec)
    opt, start = None, 0
    if resume_from is not None:
        params, opt, start, _ = load_training_checkpoint(resume_from)
    def ckpt(p, o, k):
        save_training_checkpoint(checkpoint_path, p, o, k, cfg)
        return checkpoint_path
    res = optimize(sgm_loss_fn(cfg, spec, target), params, sgm_batch_fn(target, spec, cfg.seed, cfg.batch_size),
                   cfg.batches, cfg.lr, cfg.eval_every, cfg.chunk, cfg.clip_norm, opt, start, ckpt if checkpoint_path is not None else None,
                   cfg.checkpoint_every)
    return res.params, res.trace


def write_loss_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for k, v in trace:
            w.writerow([k, f"{v:.17g}"])
    return path


def read_loss_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(a), float(b)) for a, b in rows]
