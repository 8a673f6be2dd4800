"""Two-sample statistics and moment diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DomainError, UnsupportedError
from .targets import ParticleEnsemble, TargetDistribution, in_support

_BLOCK = 2048
MEDIAN_SUBSAMPLE = 2000


def _arr(X):
    X = X.states if isinstance(X, ParticleEnsemble) else X
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise DomainError("samples must be finite")
    return X


def _sq_dists(A, B):
    d = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def _block_sum(A, B, fn):
    """``sum_ij fn(|a_i - b_j|^2)`` in fixed-order row blocks."""
    total = 0.0
    for i in range(0, A.shape[0], _BLOCK):
        total += float(np.sum(fn(_sq_dists(A[i:i + _BLOCK], B))))
    return total


def median_bandwidth(X, Y, max_points=MEDIAN_SUBSAMPLE):
    """Median pairwise distance of the pooled sample.

    Pools larger than ``max_points`` use an evenly strided subsample so the
    value is deterministic and cheap.
    """
    Z = np.concatenate([_arr(X), _arr(Y)])
    if Z.shape[0] > max_points:
        Z = Z[np.linspace(0, Z.shape[0] - 1, max_points).astype(int)]
    d = np.sqrt(_sq_dists(Z, Z)[np.triu_indices(Z.shape[0], 1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


def mmd_squared(X, Y, bandwidth=None, unbiased=True):
    """MMD^2 with kernel ``exp(-|a-b|^2 / (2 bandwidth^2))``.

    The unbiased U-statistic drops the diagonal of both within-sample sums
    and can be slightly negative.  ``bandwidth=None`` uses
    :func:`median_bandwidth`.
    """
    X, Y = _arr(X), _arr(Y)
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise DomainError("MMD needs at least two points per sample")
    if X.shape[1] != Y.shape[1]:
        raise DomainError("samples have different dimensions")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise DomainError("bandwidth must be positive")
    if np.isinf(bw):
        return 0.0
    k = lambda d2: np.exp(-d2 / (2.0 * bw * bw))
    kxx, kyy, kxy = _block_sum(X, X, k), _block_sum(Y, Y, k), _block_sum(X, Y, k)
    if unbiased:
        return (kxx - n) / (n * (n - 1)) + (kyy - m) / (m * (m - 1)) - 2.0 * kxy / (n * m)
    return kxx / n**2 + kyy / m**2 - 2.0 * kxy / (n * m)


def energy_distance(X, Y):
    """U-statistic of ``2 E|X-Y| - E|X-X'| - E|Y-Y'|``."""
    X, Y = _arr(X), _arr(Y)
    n, m = X.shape[0], Y.shape[0]
    if n < 2 or m < 2:
        raise DomainError("energy distance needs at least two points per sample")
    dist = np.sqrt
    exy = _block_sum(X, Y, dist) / (n * m)
    exx = _block_sum(X, X, dist) / (n * (n - 1))
    eyy = _block_sum(Y, Y, dist) / (m * (m - 1))
    return 2.0 * exy - exx - eyy


def support_overlap(X, target: TargetDistribution) -> float:
    """Fraction of points strictly inside the checkerboard's support cells."""
    if target.kind != "checkerboard":
        raise UnsupportedError("support overlap is defined for the checkerboard only")
    return float(np.mean(in_support(target, _arr(X))))


def moment_report(X, target: TargetDistribution) -> dict:
    X = _arr(X)
    mean_err = np.abs(X.mean(axis=0) - target.mean)
    cov_err = np.cov(X.T).reshape(X.shape[1], X.shape[1]) - target.cov
    return {
        "mean_error": mean_err.tolist(),
        "max_mean_error": float(mean_err.max()),
        "cov_frobenius_error": float(np.linalg.norm(cov_err)),
        "max_cov_error": float(np.abs(cov_err).max()),
    }


@dataclass
class MetricReport:
    mmd2: Optional[float] = None
    bandwidth: Optional[float] = None
    energy_distance: Optional[float] = None
    mean_error: Optional[list] = None
    max_mean_error: Optional[float] = None
    cov_frobenius_error: Optional[float] = None
    max_cov_error: Optional[float] = None
    support_overlap: Optional[float] = None
    n: Optional[int] = None
    m: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def metric_report(X, Y=None, target: Optional[TargetDistribution] = None, bandwidth=None,
                  energy=True) -> MetricReport:
    """Two-sample statistics against reference samples ``Y`` plus moment and
    support diagnostics against ``target`` when given."""
    X = _arr(X)
    rep = MetricReport(n=int(X.shape[0]))
    if Y is not None:
        Y = _arr(Y)
        rep.m = int(Y.shape[0])
        rep.bandwidth = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
        rep.mmd2 = mmd_squared(X, Y, rep.bandwidth)
        if energy:
            rep.energy_distance = energy_distance(X, Y)
    if target is not None:
        for k, v in moment_report(X, target).items():
            setattr(rep, k, v)
        if target.kind == "checkerboard":
            rep.support_overlap = support_overlap(X, target)
    return rep
