"""Overdamped Langevin particles as the zero-relaxation limit of the KL
gradient flow, with a kernel estimate of the free energy along the run."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import logsumexp

from .dynamics import particle_normals
from .errors import ConfigError, DivergedSimulationError, DomainError, UnsupportedError
from .targets import ParticleEnsemble, TargetDistribution, jnp_log_density_fn, log_density


@dataclass(frozen=True)
class WGFRun:
    """``init_var`` scales the ``N(0, init_var I)`` starting law."""

    target: TargetDistribution
    n: int = 5000
    dt: float = 0.01
    steps: int = 300
    stride: int = 10
    seed: int = 0
    init_var: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("step size must be positive")
        if self.n < 1 or self.steps < 0 or self.stride < 1:
            raise ConfigError("need n >= 1, steps >= 0 and stride >= 1")
        if not self.target.has_score:
            raise UnsupportedError("Langevin flow needs a target with an analytic score")
        if not self.init_var > 0:
            raise ConfigError("init_var must be positive")


@partial(jax.jit, static_argnames=("logp", "n_snap", "stride"))
def _langevin(logp, x, key, ids, dt, n_snap, stride):
    score = jax.vmap(jax.grad(logp))
    sq = jnp.sqrt(2.0 * dt)

    def step(carry, k):
        x, bad = carry
        x = x + dt * score(x) + sq * particle_normals(key, ids, k, x.shape[1])
        bad = jnp.where((bad < 0) & ~jnp.all(jnp.isfinite(x)), k, bad)
        return (x, bad), None

    def snap(carry, j):
        carry, _ = jax.lax.scan(step, carry, j * stride + jnp.arange(stride))
        return carry, carry[0]

    (x, bad), snaps = jax.lax.scan(snap, (x, jnp.asarray(-1)), jnp.arange(n_snap))
    return snaps, bad


def langevin_flow(run: WGFRun) -> list:
    """Euler-Maruyama for ``dX = grad log pi(X) dt + sqrt(2) dW``.

    Returns snapshots at steps ``0, stride, 2 stride, ...`` (up to
    ``steps``) with ``time_label`` the elapsed time.
    """
    d = run.target.d
    k0, k1 = jax.random.split(jax.random.PRNGKey(run.seed))
    ids = jnp.arange(run.n)
    x0 = np.sqrt(run.init_var) * particle_normals(k0, ids, 0, d)
    out = [ParticleEnsemble(np.asarray(x0), 0.0, run.seed, "wgf step 0")]
    n_snap = run.steps // run.stride
    if n_snap:
        snaps, bad = _langevin(jnp_log_density_fn(run.target), x0, k1, ids, run.dt, n_snap, run.stride)
        if int(bad) >= 0:
            raise DivergedSimulationError(f"Langevin particles non-finite at step {int(bad)}", step=int(bad))
        for j, s in enumerate(np.asarray(snaps), start=1):
            k = j * run.stride
            out.append(ParticleEnsemble(s, k * run.dt, run.seed, f"wgf step {k}"))
    return out


def ou_variance_recursion(v0, dt, steps, target_var=1.0):
    """Per-coordinate variance of the scheme for ``pi = N(0, target_var)``:
    ``v_{k+1} = (1 - dt / target_var)^2 v_k + 2 dt``."""
    v = np.empty(steps + 1)
    v[0] = v0
    r = (1.0 - dt / target_var) ** 2
    for k in range(steps):
        v[k + 1] = r * v[k] + 2.0 * dt
    return v


def ou_variance_exact(v0, t, target_var=1.0):
    """Continuous-time variance ``tau + (v0 - tau) exp(-2 t / tau)``."""
    t = np.asarray(t, dtype=float)
    return target_var + (v0 - target_var) * np.exp(-2.0 * t / target_var)


def silverman_bandwidth(X) -> float:
    n, d = X.shape
    sd = np.sqrt(np.mean(np.var(X, axis=0, ddof=1)))
    return float(sd * (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0)))


def kde_log_density_loo(X, bandwidth):
    """Leave-one-out Gaussian KDE log-density at each sample point."""
    n, d = X.shape
    if n < 2:
        raise DomainError("KDE needs at least two points")
    out = np.empty(n)
    c = -np.log(n - 1) - 0.5 * d * np.log(2 * np.pi * bandwidth**2)
    sq = np.sum(X * X, 1)
    for i in range(0, n, 1024):
        blk = X[i:i + 1024]
        d2 = np.maximum(sq[i:i + 1024, None] + sq[None, :] - 2.0 * blk @ X.T, 0.0)
        logk = -d2 / (2.0 * bandwidth**2)
        logk[np.arange(blk.shape[0]), i + np.arange(blk.shape[0])] = -np.inf
        out[i:i + 1024] = logsumexp(logk, axis=1) + c
    return out


def kde_kl(X, target: TargetDistribution, bandwidth=None):
    """``mean_i [log rho_hat_{-i}(X_i) - log pi(X_i)]`` and the bandwidth used."""
    X = X.states if isinstance(X, ParticleEnsemble) else np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise DomainError("empty snapshot")
    bw = silverman_bandwidth(X) if bandwidth is None else float(bandwidth)
    return float(np.mean(kde_log_density_loo(X, bw) - log_density(target, X))), bw


def free_energy_trace(snapshots, target: TargetDistribution, bandwidth=None):
    """KDE estimate of ``KL(rho_hat || pi)`` per snapshot.

    Returns ``(values, bandwidths)``; with ``bandwidth=None`` each snapshot
    uses Silverman's rule on its own particles.
    """
    if len(snapshots) < 2:
        raise DomainError("need at least two snapshots")
    vals, bws = [], []
    for snap in snapshots:
        v, bw = kde_kl(snap, target, bandwidth)
        vals.append(v)
        bws.append(bw)
    return np.asarray(vals), np.asarray(bws)


def gaussian_kl(mean, cov, target: TargetDistribution) -> float:
    """Closed-form ``KL(N(mean, cov) || target)`` for a Gaussian target."""
    if target.kind != "gaussian":
        raise UnsupportedError("closed-form KL needs a Gaussian target")
    m1, S1 = np.asarray(mean, dtype=float), np.asarray(cov, dtype=float)
    m2, S2 = target.means[0], target.covs[0]
    P2 = np.linalg.inv(S2)
    dm = m2 - m1
    d = m1.shape[0]
    return 0.5 * (np.trace(P2 @ S1) + dm @ P2 @ dm - d + np.linalg.slogdet(S2)[1] - np.linalg.slogdet(S1)[1])


def smooth(values, window):
    """Centred moving average with edge windows truncated."""
    values = np.asarray(values, dtype=float)
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(values)])
    lo = np.clip(np.arange(values.size) - half, 0, values.size)
    hi = np.clip(np.arange(values.size) + half + 1, 0, values.size)
    return (c[hi] - c[lo]) / (hi - lo)


def write_trace_csv(path, steps, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "kl_estimate"])
        for k, v in zip(steps, values):
            w.writerow([int(k), f"{v:.17g}"])
    return path
