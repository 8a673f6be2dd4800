"""Noising transitions, reverse-time samplers and CNF integration.

Time convention: noising time ``s`` runs over ``[0, T]`` with ``eta(., 0)``
the data law; generation time is ``t = T - s``.  Score models are always
called with the noising time.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache, partial
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from jax.extend.random import threefry_2x32
from jax.scipy.special import log_ndtr, logsumexp as jlogsumexp, ndtri

from .autodiff import MLPParams, Model, mlp_apply, model_bundle
from .errors import ConfigError, DivergedSimulationError, DomainError, UnsupportedError
from .targets import ParticleEnsemble, TargetDistribution, gaussian_mixture


@dataclass(frozen=True)
class SDESpec:
    """Affine drift ``f(x) = a x + b`` and constant diffusion ``sigma``.

    The noising process is ``dY = -f(Y) ds + sigma dW``, which has a Gaussian
    transition ``Y(s) = m(s) Y(0) + c(s) + sqrt(v(s)) Z``.
    """

    a: float = 0.5
    b: float = 0.0
    sigma: float = 1.0
    T: float = 3.0
    d: int = 2

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if not self.T > 0:
            raise ConfigError("T must be positive")

    @classmethod
    def ou(cls, d=2, T=3.0):
        return cls(0.5, 0.0, 1.0, T, d)

    def drift(self, x):
        return self.a * x + self.b

    @property
    def div_drift(self) -> float:
        return self.a * self.d

    def transition(self, s):
        """``(m, c, v)`` for noising time ``s`` (works on arrays and tracers)."""
        a, sig2 = self.a, self.sigma**2
        if a == 0.0:
            return jnp.ones_like(s), -self.b * s, sig2 * s
        # expm1 keeps c and v accurate when a * s is tiny
        return jnp.exp(-a * s), self.b * jnp.expm1(-a * s) / a, -sig2 * jnp.expm1(-2.0 * a * s) / (2.0 * a)

    def stationary(self):
        """Mean and variance of the long-time law (``a > 0`` only)."""
        if self.a <= 0:
            raise DomainError("no stationary law for a <= 0")
        return -self.b / self.a, self.sigma**2 / (2.0 * self.a)


def perturb(spec: SDESpec, x0, s, z):
    """Exact noising of ``x0`` at per-row times ``s`` with standard normals ``z``."""
    m, c, v = spec.transition(s)
    m, c, v = (jnp.asarray(q)[..., None] if jnp.ndim(q) else q for q in (m, c, v))
    return m * x0 + c + jnp.sqrt(v) * z


def ou_perturb(spec: SDESpec, batch: ParticleEnsemble, s, rng_seed) -> ParticleEnsemble:
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0) or np.any(s_arr > spec.T):
        raise DomainError(f"noising time must lie in [0, {spec.T}]")
    if np.all(s_arr == 0):
        return ParticleEnsemble(batch.states.copy(), 0.0, rng_seed, batch.tag)
    z = np.random.default_rng(rng_seed).standard_normal(batch.states.shape)
    out = np.asarray(perturb(spec, jnp.asarray(batch.states), jnp.asarray(s_arr), jnp.asarray(z)))
    label = float(s_arr) if s_arr.ndim == 0 else float("nan")
    return ParticleEnsemble(out, label, rng_seed, batch.tag)


# ---------------------------------------------------------------- analytic eta

def noised_target(spec: SDESpec, target: TargetDistribution, s) -> TargetDistribution:
    """Law of the noised data at time ``s`` for Gaussian/mixture targets."""
    if not target.has_score:
        raise UnsupportedError("noised law in closed form only for Gaussian targets")
    m, c, v = (float(q) for q in spec.transition(float(s)))
    means = m * target.means + c
    covs = m * m * target.covs + v * np.eye(target.d)
    return gaussian_mixture(means, covs, target.weights)


def eta_log_density_fn(spec: SDESpec, target: TargetDistribution) -> Callable:
    """Traceable ``log eta(y, s)`` for a single point.

    Gaussian mixtures stay mixtures; the checkerboard gives a sum over cells
    of products of normal-CDF differences (valid for ``s > 0``).
    """
    if target.kind == "checkerboard":
        corners = jnp.asarray(target.black_cells())
        w = target.cell
        log_nb = np.log(len(target.black_cells()))

        def log_diff_ndtr(u, l):
            # log(Phi(u) - Phi(l)) for u > l, stable in both tails
            flip = l > 0
            hi = jnp.where(flip, -l, u)
            lo = jnp.where(flip, -u, l)
            lh, ll = log_ndtr(hi), log_ndtr(lo)
            return lh + jnp.log1p(-jnp.exp(ll - lh))

        def logp(y, s):
            m, c, v = spec.transition(s)
            sd = jnp.sqrt(v)
            lo = m * corners + c
            hi = m * (corners + w) + c
            per = log_diff_ndtr((y - lo) / sd, (y - hi) / sd) - jnp.log(w * m)
            return jlogsumexp(per.sum(axis=-1)) - log_nb

        return logp

    means = jnp.asarray(target.means)
    covs = jnp.asarray(target.covs)
    logw = jnp.asarray(np.log(target.weights))
    d = target.d
    eye = jnp.eye(d)

    def logp(y, s):
        m, c, v = spec.transition(s)
        mu = m * means + c
        cov = m * m * covs + v * eye
        chol = jnp.linalg.cholesky(cov)
        diff = y[None, :] - mu
        sol = jax.scipy.linalg.solve_triangular(chol, diff[..., None], lower=True)[..., 0]
        logdet = 2.0 * jnp.sum(jnp.log(jnp.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
        comp = -0.5 * (jnp.sum(sol * sol, axis=-1) + logdet + d * np.log(2 * np.pi))
        return jlogsumexp(logw + comp)

    return logp


def eta_score_fn(spec: SDESpec, target: TargetDistribution) -> Callable:
    """Traceable exact score ``grad_y log eta(y, s)`` for a single point."""
    return jax.grad(eta_log_density_fn(spec, target), argnums=0)


# ---------------------------------------------------------------- samplers

@lru_cache(maxsize=None)
def _point_field(fn):
    return lambda _, x, s: jax.vmap(lambda xi, si: jnp.atleast_1d(fn(xi, si)))(x, s)


def _field(model: Model):
    """``(field(params, x, s), params)`` with networks passed as traced data so
    that jitted samplers compile once per architecture."""
    if isinstance(model, MLPParams):
        return mlp_apply, model
    return _point_field(model), None


def _n_steps(T, dt):
    if not dt > 0:
        raise ConfigError("time step must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-12 * max(1.0, T):
        raise ConfigError(f"dt={dt} does not divide T={T}")
    return n


def particle_normals(key, ids, step, d):
    """Standard normals of shape ``(len(ids), d)`` for one time step.

    Entry ``(i, j)`` is a threefry hash of ``(key, step, ids[i] * d + j)``
    mapped through the inverse normal CDF at 53-bit resolution, so it
    depends only on the particle's global index: a run split into shards
    with matching ``ids`` reproduces the unsplit run bit for bit.
    """
    k = jax.random.fold_in(key, step)
    c = (ids[:, None] * d + jnp.arange(d)).astype(jnp.uint32).ravel()
    out = threefry_2x32(k, jnp.concatenate([c, jnp.zeros_like(c)]))
    m = c.shape[0]
    hi = (out[:m] >> 6).astype(jnp.float64)
    lo = (out[m:] >> 5).astype(jnp.float64)
    u = (hi * 2.0**27 + lo + 0.5) * 2.0**-53
    return ndtri(u).reshape(ids.shape[0], d)


def _initial_states(spec, n, key, x_init, offset=0):
    if x_init is not None:
        x = jnp.asarray(x_init.states if isinstance(x_init, ParticleEnsemble) else x_init, dtype=jnp.float64)
        if x.shape != (n, spec.d):
            raise ConfigError(f"initial states must have shape {(n, spec.d)}")
        return x
    mean, var = spec.stationary()
    return mean + np.sqrt(var) * particle_normals(key, jnp.arange(offset, offset + n), 0, spec.d)


def _first_bad(bad, k, x):
    now = ~jnp.all(jnp.isfinite(x))
    return jnp.where((bad < 0) & now, k, bad)


@partial(jax.jit, static_argnames=("field", "spec", "n_steps", "stride"))
def _em_reverse(field, params, spec, x, key, ids, dt, n_steps, stride):
    T, sig = spec.T, spec.sigma
    sqdt = jnp.sqrt(dt)

    def step(carry, k):
        x, bad = carry
        t = k * dt
        s = jnp.full((x.shape[0],), T - t)
        xi = particle_normals(key, ids, k, x.shape[1])
        x = x + (spec.drift(x) + sig**2 * field(params, x, s)) * dt + sig * sqdt * xi
        return (x, _first_bad(bad, k, x)), (x if stride else None)

    (x, bad), traj = jax.lax.scan(step, (x, jnp.asarray(-1)), jnp.arange(n_steps))
    return x, bad, traj


def _finish(x, bad, what):
    bad = int(bad)
    if bad >= 0:
        raise DivergedSimulationError(f"{what}: non-finite state at step {bad}", step=bad)
    return np.asarray(x)


def reverse_sde_simulate(spec: SDESpec, score: Model, n: int, dt: float, rng_seed: int,
                         x_init=None, record_every: int = 0, offset: int = 0):
    """Euler-Maruyama for ``dX = [f + sigma^2 score(X, T - t)] dt + sigma dW``.

    Starts from the stationary law of the noising process unless ``x_init``
    is given.  With ``record_every > 0`` also returns ``(times, states)`` of
    every ``record_every``-th step.  ``offset`` is the global index of the
    first particle when a large run is split into shards.
    """
    n_steps = _n_steps(spec.T, dt)
    k0, k1 = jax.random.split(jax.random.PRNGKey(rng_seed))
    x = _initial_states(spec, n, k0, x_init, offset)
    ids = jnp.arange(offset, offset + n)
    x, bad, traj = _em_reverse(*_field(score), spec, x, k1, ids, dt, n_steps, bool(record_every))
    out = ParticleEnsemble(_finish(x, bad, "reverse SDE"), 0.0, rng_seed, "reverse_sde")
    if record_every:
        idx = np.arange(record_every - 1, n_steps, record_every)
        return out, (dt * (idx + 1), np.asarray(traj)[idx])
    return out


@partial(jax.jit, static_argnames=("field", "spec", "n_steps", "method"))
def _flow(field, params, spec, x, dt, n_steps, method):
    T, half_s2 = spec.T, 0.5 * spec.sigma**2

    def rhs(x, t):
        s = jnp.full((x.shape[0],), T - t)
        return spec.drift(x) + half_s2 * field(params, x, s)

    def step(carry, k):
        x, bad = carry
        t = k * dt
        if method == "euler":
            x = x + dt * rhs(x, t)
        else:
            k1 = rhs(x, t)
            k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = rhs(x + dt * k3, t + dt)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return (x, _first_bad(bad, k, x)), None

    (x, bad), _ = jax.lax.scan(step, (x, jnp.asarray(-1)), jnp.arange(n_steps))
    return x, bad


def probability_flow_simulate(spec: SDESpec, score: Model, n: int, dt: float = 0.01, rng_seed: int = 0,
                              method: str = "rk4", x_init=None) -> ParticleEnsemble:
    """Deterministic ``dx = [f + (sigma^2 / 2) score(x, T - t)] dt``."""
    if method not in ("rk4", "euler"):
        raise ConfigError(f"unknown integrator {method!r}")
    n_steps = _n_steps(spec.T, dt)
    k0, _ = jax.random.split(jax.random.PRNGKey(rng_seed))
    x = _initial_states(spec, n, k0, x_init)
    x, bad = _flow(*_field(score), spec, x, dt, n_steps, method)
    return ParticleEnsemble(_finish(x, bad, "probability flow"), 0.0, rng_seed, "probability_flow")


# ---------------------------------------------------------------- CNF

def potential_flow_terms(potential: Model, x, t):
    """Velocity ``-grad U`` and the running integrands of the potential flow.

    Returns ``(v, div v, |v|^2 / 2, |dU/dt - |grad U|^2 / 2|)``.
    """
    b = model_bundle(potential, x, jnp.broadcast_to(t, (x.shape[0],)), second=True)
    grad_u = b.jacobian_x[:, 0, :]
    v = -grad_u
    kinetic = 0.5 * jnp.sum(grad_u * grad_u, axis=-1)
    hjb = jnp.abs(b.time_partial[:, 0] - kinetic)
    return v, -b.component_laplacians[:, 0], kinetic, hjb


def cnf_path(potential: Model, x0, t0, t1, n_steps, keep_path=False):
    """RK4 on the state augmented with three running integrals (traceable).

    Integrates from ``t0`` to ``t1`` (either order).  Returns ``(x_end, acc,
    path)`` where ``acc[:, 0]`` is the signed integral of ``div v`` along the
    direction of travel, ``acc[:, 1]`` the kinetic energy integral and
    ``acc[:, 2]`` the integrated HJB residual, the last two accumulated
    over ``|dt|``.  ``path`` holds the states at every step when requested.
    """
    h = (t1 - t0) / n_steps
    ah = jnp.abs(h)

    def rhs(x, t):
        v, div, kin, hjb = potential_flow_terms(potential, x, t)
        return v, jnp.stack([div * h, kin * ah, hjb * ah], axis=-1) / h

    def step(carry, k):
        x, acc = carry
        t = t0 + k * h
        v1, a1 = rhs(x, t)
        v2, a2 = rhs(x + 0.5 * h * v1, t + 0.5 * h)
        v3, a3 = rhs(x + 0.5 * h * v2, t + 0.5 * h)
        v4, a4 = rhs(x + h * v3, t + h)
        x = x + h / 6.0 * (v1 + 2 * v2 + 2 * v3 + v4)
        acc = acc + h / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        return (x, acc), (x if keep_path else None)

    acc0 = jnp.zeros((x0.shape[0], 3), dtype=x0.dtype)
    (x, acc), path = jax.lax.scan(step, (x0, acc0), jnp.arange(n_steps))
    return x, acc, path


@partial(jax.jit, static_argnames=("potential", "n_steps", "keep_path"))
def _cnf_path_fn(potential, x0, t0, t1, n_steps, keep_path):
    return cnf_path(potential, x0, t0, t1, n_steps, keep_path)


@partial(jax.jit, static_argnames=("n_steps", "keep_path"))
def _cnf_path_net(potential, x0, t0, t1, n_steps, keep_path):
    return cnf_path(potential, x0, t0, t1, n_steps, keep_path)


def run_cnf_path(potential: Model, x0, t0, t1, n_steps, keep_path=False):
    x0 = jnp.asarray(x0, dtype=jnp.float64)
    fn = _cnf_path_net if isinstance(potential, MLPParams) else _cnf_path_fn
    return fn(potential, x0, float(t0), float(t1), int(n_steps), bool(keep_path))


def cnf_integrate(potential: Model, x0, direction="forward", dt=1e-2, T=1.0, return_path=False):
    """Flow ``dx/dt = -grad U(x, t)`` over ``[0, T]`` with log-density tracking.

    ``forward`` goes from ``t=0`` to ``T``; ``reverse`` starts at ``t=T`` and
    retraces to ``0``.  Returns ``(endpoint, accumulated divergence)``; the
    change of log-density along each path is minus the accumulated divergence.
    """
    if isinstance(potential, MLPParams) and potential.d_out != 1:
        raise ConfigError("potential network must have scalar output")
    n_steps = _n_steps(T, dt)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if direction == "forward":
        t0, t1 = 0.0, T
    elif direction == "reverse":
        t0, t1 = T, 0.0
    else:
        raise ConfigError(f"direction must be 'forward' or 'reverse', not {direction!r}")
    x, acc, path = run_cnf_path(potential, x0, t0, t1, n_steps, return_path)
    x = np.asarray(x)
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(np.asarray(acc))):
        raise DivergedSimulationError("CNF trajectory became non-finite")
    if return_path:
        return x, np.asarray(acc[:, 0]), np.concatenate([x0[None], np.asarray(path)], axis=0)
    return x, np.asarray(acc[:, 0])


def write_trajectory_csv(path, times, states):
    """Rows ``particle,step,t,x0,...`` for states of shape ``(n_rec, n, d)``."""
    states = np.asarray(states)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle", "step", "t"] + [f"x{i}" for i in range(states.shape[2])])
        for k, t in enumerate(times):
            for i, row in enumerate(states[k]):
                w.writerow([i, k, f"{t:.17g}"] + [f"{v:.17g}" for v in row])
    return path
