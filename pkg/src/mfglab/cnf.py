"""Potential-flow normalizing flows: OT-flow and OT-Boltzmann generator.

Data sit at ``t = 0`` and the standard normal reference at ``t = T``; the
velocity is ``-grad U``.  Generation integrates the same flow backwards
from reference draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import jax.numpy as jnp
import numpy as np

from .autodiff import MLPParams, Model, init_mlp
from .dynamics import cnf_integrate
from .errors import ConfigError, UnsupportedError
from .losses import otbg_value, otflow_value, std_normal_logpdf
from .targets import ParticleEnsemble, TargetDistribution, draw, jnp_log_density_fn
from .trainer import AdamState, optimize

CNF_OBJECTIVES = ("ot_flow", "ot_bg", "generalized_ot")


@dataclass(frozen=True)
class CNFRun:
    """OT-flow training setup.

    ``lam`` weights the forward KL for ``ot_bg``; ``generalized_ot`` is the
    same objective with ``lam = 0`` (reverse KL only).  ``dt`` is the
    training integrator step.  ``transport_weight`` multiplies the kinetic
    cost, which is the same as stretching the horizon by its inverse.
    """

    objective: str = "ot_flow"
    lam: float = 1.0
    alpha1: float = 0.0
    dt: float = 0.1
    T: float = 1.0
    transport_weight: float = 1.0
    hidden: int = 2
    width: int = 32
    activation: str = "gelu"
    batches: int = 1000
    batch_size: int = 64
    n_ref: Optional[int] = None
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100
    chunk: int = 500

    def __post_init__(self):
        if self.objective not in CNF_OBJECTIVES:
            raise ConfigError(f"objective must be one of {CNF_OBJECTIVES}")
        if not self.dt > 0 or not self.T > 0:
            raise ConfigError("dt and T must be positive")
        n = round(self.T / self.dt)
        if n < 1 or abs(n * self.dt - self.T) > 1e-9 * self.T:
            raise ConfigError("dt must divide T")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.alpha1 < 0 or self.transport_weight < 0:
            raise ConfigError("alpha1 and transport_weight must be nonnegative")
        if self.batches < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("invalid training sizes or learning rate")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.objective == "generalized_ot" else self.lam


def init_potential(run: CNFRun, d: int) -> MLPParams:
    """Random hidden layers with a zero output layer, so ``U = 0`` at start
    while every weight still receives gradient."""
    net = init_mlp(d, 1, run.hidden, run.width, run.activation, run.seed)
    w = list(net.weights)
    b = list(net.biases)
    w[-1] = jnp.zeros_like(w[-1])
    b[-1] = jnp.zeros_like(b[-1])
    return MLPParams(tuple(w), tuple(b), net.activation, net.seed)


def cnf_loss_fn(run: CNFRun, target: TargetDistribution):
    n_steps, T, w = run.n_steps, run.T, run.transport_weight
    if run.objective == "ot_flow":
        return lambda p, b: otflow_value(p, b["x"], run.alpha1, T, n_steps, w)
    if not target.has_score:
        raise UnsupportedError("Boltzmann-generator objectives need an evaluable target log-density")
    logpi = jnp_log_density_fn(target)
    lam = run.effective_lam
    return lambda p, b: otbg_value(p, b["x"], b["z"], lam, logpi, T, n_steps, w)


def cnf_batch_fn(run: CNFRun, target: TargetDistribution):
    n_ref = run.n_ref or run.batch_size

    def make(k):
        rng = np.random.default_rng([run.seed, k])
        return {"x": draw(target, run.batch_size, rng), "z": rng.standard_normal((n_ref, target.d))}

    return make


def train_cnf(run: CNFRun, target: TargetDistribution, init: Optional[MLPParams] = None,
              opt_state: Optional[AdamState] = None):
    """Returns ``(potential, trace)`` with ``trace`` of ``(batch, loss)``."""
    params = init if init is not None else init_potential(run, target.d)
    res = optimize(cnf_loss_fn(run, target), params, cnf_batch_fn(run, target), run.batches, run.lr,
                   run.eval_every, run.chunk, None, opt_state)
    return res.params, res.trace


def generate_cnf(potential: Model, n: int, dt: float = 0.01, rng_seed: int = 0, d: Optional[int] = None,
                 T: float = 1.0):
    """Reference draws flowed back to ``t = 0``.

    Returns ``(ensemble, loglik)`` with ``loglik = log rho_ref(z) - acc``,
    ``acc`` being the divergence integral accumulated along the backward
    path (the log-density change is its negative).
    """
    if d is None:
        if not isinstance(potential, MLPParams):
            raise ConfigError("pass d for callable potentials")
        d = potential.d
    z = np.random.default_rng(rng_seed).standard_normal((n, d))
    x, acc = cnf_integrate(potential, z, "reverse", dt, T)
    loglik = np.asarray(std_normal_logpdf(jnp.asarray(z))) - acc
    return ParticleEnsemble(x, 0.0, rng_seed, "cnf"), loglik


def log_likelihood(potential: Model, x, dt: float = 0.01, T: float = 1.0):
    """Model log-density at data points via the forward flow,
    ``log rho_ref(z) + int div v dt``."""
    z, acc = cnf_integrate(potential, x, "forward", dt, T)
    return np.asarray(std_normal_logpdf(jnp.asarray(z))) + acc


def roundtrip_error(potential: Model, x, dt: float = 0.01, T: float = 1.0) -> float:
    """Max abs error of data -> latent -> data with matched steps."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z, _ = cnf_integrate(potential, x, "forward", dt, T)
    back, _ = cnf_integrate(potential, z, "reverse", dt, T)
    return float(np.max(np.abs(back - x)))


def path_curvature(potential: Model, x, dt: float = 0.01, T: float = 1.0) -> float:
    """Mean over particles of the summed norm of second differences of the
    forward trajectory (zero for straight constant-speed paths)."""
    _, _, path = cnf_integrate(potential, x, "forward", dt, T, return_path=True)
    d2 = path[2:] - 2.0 * path[1:-1] + path[:-2]
    return float(np.mean(np.sum(np.linalg.norm(d2, axis=-1), axis=0)))
