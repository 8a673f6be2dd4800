"""Target distributions and particle ensembles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp as jlogsumexp
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, UnsupportedError

# log-density returned off the support; callers test with `off_support`
LOG_ZERO = float("-inf")


def off_support(logp):
    return np.isneginf(logp)


@dataclass(frozen=True, eq=False)
class TargetDistribution:
    """``kind`` is one of ``gaussian``, ``gaussian_mixture`` or ``checkerboard``.

    Gaussians are stored as one-component mixtures.  The checkerboard is an
    ``n_cells x n_cells`` grid of square cells of side ``cell`` starting at
    ``origin`` in both coordinates; cells with even ``i + j`` carry the mass.
    """

    kind: str
    d: int
    means: Optional[np.ndarray] = None
    covs: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    n_cells: int = 4
    cell: float = 1.0
    origin: float = -2.0
    _chol: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _prec: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _logdet: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "checkerboard":
            if self.d != 2 or self.n_cells < 1 or self.cell <= 0:
                raise ConfigError("checkerboard needs d=2, n_cells>=1, cell>0")
            return
        if self.kind not in ("gaussian", "gaussian_mixture"):
            raise ConfigError(f"unknown target kind {self.kind!r}")
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float).reshape(means.shape[0], self.d, self.d)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if means.shape[1] != self.d or w.shape[0] != means.shape[0]:
            raise ConfigError("means/covs/weights shapes disagree")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2)):
            raise ConfigError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("covariances must be positive definite") from exc
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_prec", np.linalg.inv(covs))
        object.__setattr__(self, "_logdet", 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(-1))

    @property
    def mean(self) -> np.ndarray:
        if self.kind == "checkerboard":
            return _checkerboard_moments(self)[0]
        return self.weights @ self.means

    @property
    def cov(self) -> np.ndarray:
        if self.kind == "checkerboard":
            return _checkerboard_moments(self)[1]
        m = self.mean
        dm = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, dm, dm)

    @property
    def has_score(self) -> bool:
        return self.kind != "checkerboard"

    def black_cells(self) -> np.ndarray:
        """Lower-left corners of the support cells, shape ``(n_black, 2)``."""
        ij = [(i, j) for i in range(self.n_cells) for j in range(self.n_cells) if (i + j) % 2 == 0]
        return self.origin + self.cell * np.array(ij, dtype=float)


def gaussian(mean, cov) -> TargetDistribution:
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.shape[0]
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov * np.eye(d)
    return TargetDistribution("gaussian", d, mean[None], cov[None], np.ones(1))


def gaussian_mixture(means, covs, weights=None) -> TargetDistribution:
    means = np.atleast_2d(np.asarray(means, dtype=float))
    k, d = means.shape
    covs = np.asarray(covs, dtype=float)
    if covs.ndim == 0:
        covs = np.broadcast_to(covs * np.eye(d), (k, d, d)).copy()
    elif covs.ndim == 1:
        covs = covs[:, None, None] * np.eye(d)
    weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    return TargetDistribution("gaussian_mixture", d, means, covs, weights)


def checkerboard(n_cells=4, cell=1.0, origin=None) -> TargetDistribution:
    if origin is None:
        origin = -0.5 * n_cells * cell
    return TargetDistribution("checkerboard", 2, n_cells=n_cells, cell=cell, origin=origin)


def _checkerboard_moments(target):
    corners = target.black_cells()
    c = corners + 0.5 * target.cell
    mean = c.mean(axis=0)
    dc = c - mean
    cov = dc.T @ dc / len(c) + np.eye(2) * target.cell**2 / 12.0
    return mean, cov


@dataclass
class ParticleEnsemble:
    """``states`` is an ``(n, d)`` array; ``time_label`` is the noising time."""

    states: np.ndarray
    time_label: float = 0.0
    seed: Optional[int] = None
    tag: str = ""

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] < 1:
            raise DomainError("ensemble needs at least one particle")
        if not np.all(np.isfinite(self.states)):
            raise DomainError("ensemble states must be finite")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]


def draw(target: TargetDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Raw ``(n, d)`` draws using an existing generator."""
    if n < 1:
        raise DomainError("need n >= 1")
    if target.kind == "checkerboard":
        corners = target.black_cells()
        idx = rng.integers(0, len(corners), size=n)
        return corners[idx] + target.cell * rng.random((n, 2))
    comp = rng.choice(len(target.weights), size=n, p=target.weights) if len(target.weights) > 1 else np.zeros(n, int)
    z = rng.standard_normal((n, target.d))
    return target.means[comp] + np.einsum("nij,nj->ni", target._chol[comp], z)


def sample(target: TargetDistribution, n: int, rng_seed: int, tag="target") -> ParticleEnsemble:
    rng = np.random.default_rng(rng_seed)
    return ParticleEnsemble(draw(target, n, rng), 0.0, rng_seed, tag)


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise DomainError(f"points have dimension {x.shape[1]}, target has {d}")
    if not np.all(np.isfinite(x)):
        raise DomainError("points must be finite")
    return x, single


def _component_logpdf(target, x):
    diff = x[:, None, :] - target.means[None]
    maha = np.einsum("nki,kij,nkj->nk", diff, target._prec, diff)
    return -0.5 * (maha + target._logdet + target.d * np.log(2 * np.pi))


def in_support(target: TargetDistribution, x) -> np.ndarray:
    """Strict interior of the checkerboard support cells."""
    if target.kind != "checkerboard":
        raise UnsupportedError("support cells are defined for the checkerboard only")
    x, _ = _as_points(x, 2)
    u = (x - target.origin) / target.cell
    ij = np.floor(u)
    frac = u - ij
    inside = np.all((ij >= 0) & (ij < target.n_cells) & (frac > 0), axis=1)
    return inside & ((ij.sum(axis=1) % 2) == 0)


def log_density(target: TargetDistribution, x):
    """Exact log-density; checkerboard returns ``LOG_ZERO`` off the support."""
    x, single = _as_points(x, target.d)
    if target.kind == "checkerboard":
        n_black = len(target.black_cells())
        val = -np.log(n_black * target.cell**2)
        out = np.where(in_support(target, x), val, LOG_ZERO)
    else:
        out = logsumexp(_component_logpdf(target, x) + np.log(target.weights), axis=1)
    return out[0] if single else out


def score(target: TargetDistribution, x):
    """Gradient of the log-density (Gaussian and mixture targets)."""
    if not target.has_score:
        raise UnsupportedError("checkerboard density is discontinuous; no score")
    x, single = _as_points(x, target.d)
    logr = _component_logpdf(target, x) + np.log(target.weights)
    resp = np.exp(logr - logsumexp(logr, axis=1, keepdims=True))
    comp = -np.einsum("kij,nkj->nki", target._prec, x[:, None, :] - target.means[None])
    out = np.einsum("nk,nki->ni", resp, comp)
    return out[0] if single else out


def jnp_log_density_fn(target: TargetDistribution):
    """Traceable single-point log-density for smooth targets."""
    if not target.has_score:
        raise UnsupportedError("checkerboard log-density is not differentiable")
    means, prec = jnp.asarray(target.means), jnp.asarray(target._prec)
    const = jnp.asarray(np.log(target.weights) - 0.5 * (target._logdet + target.d * np.log(2 * np.pi)))

    def logp(x):
        diff = x[None, :] - means
        return jlogsumexp(const - 0.5 * jnp.einsum("ki,kij,kj->k", diff, prec, diff))

    return logp


# ---------------------------------------------------------------- CSV

def write_ensemble_csv(path, states):
    states = states.states if isinstance(states, ParticleEnsemble) else np.atleast_2d(states)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(f"x{i}" for i in range(states.shape[1])) + "\n")
        for row in states:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return path


def read_ensemble_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not all(h.strip() == f"x{i}" for i, h in enumerate(header)):
            raise ConfigError(f"{path}: expected header x0,x1,..., got {header}")
        rows = [[float(v) for v in r] for r in reader if r]
    return np.asarray(rows, dtype=float).reshape(-1, len(header))
