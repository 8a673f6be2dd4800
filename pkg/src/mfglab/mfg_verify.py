"""1-D grid certification of the SGM optimality system.

Densities live on a cell-centred grid ``x_j = lo + (j + 1/2) h`` over
``[lo, hi]`` with ``n_x`` cells; mass is ``h * sum(eta)``.  The
Fokker-Planck equations are discretized in conservative flux form,

    F_{j+1/2} = drift_{j+1/2} (u_j + u_{j+1}) / 2 + D (u_{j+1} - u_j) / h,

with zero flux through both ends, and stepped with Crank-Nicolson.  Column
sums of the operator vanish, so mass is conserved to round-off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded
from scipy.stats import norm

from .dynamics import SDESpec
from .errors import ConfigError, DomainError, GridResolutionError

NEG_TOL = 1e-6


@dataclass
class GridField1D:
    """``values[n, j]`` at time ``t[n]`` and cell centre ``x[j]``."""

    x: np.ndarray
    t: np.ndarray
    values: np.ndarray
    is_density: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape != (self.t.size, self.x.size):
            raise ConfigError(f"values shape {self.values.shape} != ({self.t.size}, {self.x.size})")
        if self.x.size < 3 or np.any(np.diff(self.x) <= 0):
            raise ConfigError("x grid must be increasing with at least 3 points")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("grid values must be finite")
        if self.is_density:
            m = self.masses()
            if np.any(np.abs(m - 1.0) > 1e-6):
                raise ConfigError(f"density mass off by {np.max(np.abs(m - 1)):.3g}")

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def tau(self) -> float:
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    def masses(self):
        return self.h * self.values.sum(axis=1)


def cell_grid(n_x, domain=(-8.0, 8.0)):
    lo, hi = domain
    h = (hi - lo) / n_x
    return lo + h * (np.arange(n_x) + 0.5), h


def gaussian_eta_1d(spec: SDESpec, mu0, v0, x, s):
    """Exact noised density of ``N(mu0, v0)``; broadcasts over ``x`` and ``s``."""
    m, c, v = (np.asarray(q, dtype=float) for q in spec.transition(np.asarray(s, dtype=float)))
    return norm.pdf(x, m * mu0 + c, np.sqrt(m * m * v0 + v))


def gaussian_eta_field(spec: SDESpec, mu0, v0, n_x=801, n_t=3001, domain=(-8.0, 8.0), T=None):
    T = spec.T if T is None else T
    x, _ = cell_grid(n_x, domain)
    s = np.linspace(0.0, T, n_t)
    return GridField1D(x, s, gaussian_eta_1d(spec, mu0, v0, x[None, :], s[:, None]),
                       meta={"source": "analytic", "mu0": mu0, "v0": v0})


# ---------------------------------------------------------------- Crank-Nicolson

def _flux_operator(drift_mid, D, h, n):
    """Banded (3, n) form of ``u -> (F_{j+1/2} - F_{j-1/2}) / h`` with the
    flux above, ``drift_mid`` at the ``n - 1`` interior faces."""
    up = drift_mid / 2.0 + D / h  # coefficient of u_{j+1} in F_{j+1/2}
    lo = drift_mid / 2.0 - D / h  # coefficient of u_j in F_{j+1/2}
    ab = np.zeros((3, n))
    # row j gets +F_{j+1/2} and -F_{j-1/2}
    ab[1, :-1] += lo / h
    ab[0, 1:] += up / h
    ab[1, 1:] -= up / h
    ab[2, :-1] -= lo / h
    return ab


def _banded_matvec(ab, u):
    out = ab[1] * u
    out[:-1] += ab[0, 1:] * u[1:]
    out[1:] += ab[2, :-1] * u[:-1]
    return out


def _cn_step(ab_now, ab_next, u, tau):
    rhs = u + 0.5 * tau * _banded_matvec(ab_now, u)
    lhs = -0.5 * tau * ab_next
    lhs[1] += 1.0
    return solve_banded((1, 1), lhs, rhs, overwrite_ab=True, check_finite=False)


def _check_negative(u, step):
    if u.min() < -NEG_TOL:
        raise GridResolutionError(f"negative density {u.min():.3g} at step {step}; refine the grid")


def fp_solve_1d(spec: SDESpec, initial, n_x=801, n_t=3001, domain=(-8.0, 8.0), T=None) -> GridField1D:
    """Crank-Nicolson for ``d_s eta = d_x(f eta) + (sigma^2/2) d_xx eta``.

    ``initial`` is an array on the cell centres or a callable of ``x``.
    ``n_t`` counts time levels including ``s = 0``.
    """
    if spec.d != 1:
        raise ConfigError("fp_solve_1d needs a one-dimensional spec")
    T = spec.T if T is None else T
    x, h = cell_grid(n_x, domain)
    u = np.asarray(initial(x) if callable(initial) else initial, dtype=float).copy()
    if u.shape != (n_x,) or np.any(u < 0) or abs(h * u.sum() - 1.0) > 1e-6:
        raise DomainError("initial density must be nonnegative with unit mass on the grid")
    s = np.linspace(0.0, T, n_t)
    out = np.empty((n_t, n_x))
    out[0] = u
    if n_t > 1:
        tau = s[1] - s[0]
        xm = 0.5 * (x[1:] + x[:-1])
        ab = _flux_operator(spec.drift(xm), 0.5 * spec.sigma**2, h, n_x)
        lhs = -0.5 * tau * ab
        lhs[1] += 1.0
        for k in range(1, n_t):
            rhs = u + 0.5 * tau * _banded_matvec(ab, u)
            u = solve_banded((1, 1), lhs, rhs, check_finite=False)
            _check_negative(u, k)
            out[k] = u
    return GridField1D(x, s, out, meta={"source": "fp_solve_1d", "h": h})


# ---------------------------------------------------------------- HJB residual

def hjb_residual_1d(eta: GridField1D, spec: SDESpec, threshold=1e-12):
    """Residual of the log-transformed HJB for ``U(x, t) = -log eta(x, T - t)``.

    In terms of ``phi = log eta`` and noising time the residual is
    ``-phi_s + f phi_x + (sigma^2/2) phi_x^2 + f' + (sigma^2/2) phi_xx``,
    evaluated with centred differences on interior nodes whose whole
    stencil has ``eta > threshold``.  Returns ``(field, max)`` with ``nan``
    outside the evaluation region.
    """
    v = eta.values
    if eta.t.size < 3:
        raise ConfigError("need at least three time levels")
    inner = v[1:-1, 1:-1]
    stencil = np.minimum.reduce([v[:-2, 1:-1], v[2:, 1:-1], v[1:-1, :-2], v[1:-1, 2:], inner])
    ok = stencil > threshold
    if not np.any(ok):
        raise DomainError("eta is not positive anywhere on the evaluation grid")
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.log(np.where(v > 0, v, np.nan))
    h, tau = eta.h, eta.tau
    phi_s = (phi[2:, 1:-1] - phi[:-2, 1:-1]) / (2 * tau)
    phi_x = (phi[1:-1, 2:] - phi[1:-1, :-2]) / (2 * h)
    phi_xx = (phi[1:-1, 2:] - 2 * phi[1:-1, 1:-1] + phi[1:-1, :-2]) / (h * h)
    f = spec.drift(eta.x[1:-1])[None, :]
    sig2 = spec.sigma**2
    res = np.abs(-phi_s + f * phi_x + 0.5 * sig2 * phi_x**2 + spec.a + 0.5 * sig2 * phi_xx)
    res = np.where(ok, res, np.nan)
    return res, float(np.nanmax(res))


# ---------------------------------------------------------------- duality

def duality_check_1d(eta: GridField1D, spec: SDESpec) -> float:
    """Max over generation time of the L1 gap between the controlled density
    and ``eta(., T - t)``.

    The controlled equation ``d_t rho + d_x((f + sigma v*) rho) =
    (sigma^2/2) d_xx rho`` uses ``v* = sigma d_x log eta(x, T - t)``, taken
    at faces as ``(eta_{j+1} - eta_j) / (h (eta_j + eta_{j+1}) / 2)`` so the
    drift stays bounded where eta underflows.  It starts from ``eta(., T)``.
    """
    vals = eta.values[::-1]  # vals[n] = eta(., T - t_n)
    n_t, n_x = vals.shape
    if n_t == 1:
        return 0.0
    h, tau = eta.h, eta.tau
    xm = 0.5 * (eta.x[1:] + eta.x[:-1])
    sig2 = spec.sigma**2
    D = 0.5 * sig2

    def operator(n):
        a, b = vals[n, :-1], vals[n, 1:]
        avg = 0.5 * (a + b)
        safe = np.where(avg > 0, avg, 1.0)
        score = np.where(avg > 0, (b - a) / safe / h, 0.0)
        # flux of the controlled equation is -(g rho) + D rho_x
        return _flux_operator(-(spec.drift(xm) + sig2 * score), D, h, n_x)

    rho = vals[0].copy()
    worst = 0.0
    ab = operator(0)
    for n in range(1, n_t):
        ab_next = operator(n)
        rho = _cn_step(ab, ab_next, rho, tau)
        _check_negative(rho, n)
        worst = max(worst, h * np.abs(rho - vals[n]).sum())
        ab = ab_next
    return float(worst)


# ---------------------------------------------------------------- variational derivatives

def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _functional(tag, x, sigma, rho_ref, log_pi):
    h = x[1] - x[0]
    if tag == "kl":
        return (lambda r: h * np.sum(r * np.log(r / rho_ref)),
                lambda r: 1.0 + np.log(r / rho_ref))
    if tag == "cross_entropy":
        return (lambda r: -h * np.sum(r * log_pi),
                lambda r: -log_pi)
    if tag == "fisher":
        c = sigma**2 / 8.0

        def F(r):
            dr = np.gradient(r, h)
            return c * h * np.sum(dr * dr / r)

        def dF(r):
            dr = np.gradient(r, h)
            d2 = np.empty_like(r)
            d2[1:-1] = (r[2:] - 2 * r[1:-1] + r[:-2]) / h**2
            d2[0], d2[-1] = d2[1], d2[-2]
            return -sigma**2 / 4.0 * d2 / r + c * dr * dr / (r * r)

        return F, dF
    raise ConfigError(f"unknown functional {tag!r}")


def variational_derivative_check(tag, x, rho, chi, eps=1e-4, sigma=1.0, rho_ref=None, log_pi=None,
                                 richardson=True):
    """Directional derivative of a density functional against the claimed
    first variation.

    ``tag``: ``kl`` (``int rho log(rho/rho_ref)``, derivative
    ``1 + log(rho/rho_ref)``), ``cross_entropy`` (``-int rho log pi``,
    derivative ``-log pi``) or ``fisher`` (``sigma^2/8 int |rho'|^2/rho``,
    derivative ``-sigma^2/4 rho''/rho + sigma^2/8 rho'^2/rho^2``).  The
    central difference uses step ``eps`` and, with ``richardson``, is
    extrapolated with ``eps/2``.  Returns ``(directional, inner, rel_err)``.
    """
    x = np.asarray(x, dtype=float)
    rho = np.asarray(rho, dtype=float)
    chi = np.asarray(chi, dtype=float)
    h = x[1] - x[0]
    if np.any(rho <= 0) or np.any(rho - eps * np.abs(chi) <= 0):
        raise DomainError("rho and rho +- eps*chi must stay positive")
    if abs(h * chi.sum()) > 1e-8 * max(h * np.abs(chi).sum(), 1e-300):
        raise DomainError("perturbation must integrate to zero")
    if tag == "kl" and rho_ref is None:
        rho_ref = norm.pdf(x)
    if tag == "cross_entropy" and log_pi is None:
        raise ConfigError("cross-entropy check needs log_pi on the grid")
    F, dF = _functional(tag, x, sigma, rho_ref, log_pi)

    def central(e):
        return (F(rho + e * chi) - F(rho - e * chi)) / (2.0 * e)

    d = central(eps)
    if richardson:
        d = (4.0 * central(eps / 2.0) - d) / 3.0
    inner = h * np.sum(dF(rho) * chi)
    return float(d), float(inner), _rel(d, inner)


# ---------------------------------------------------------------- suite

@dataclass
class VerifyConfig:
    a: float = 0.5
    sigma: float = 1.0
    T: float = 3.0
    mu0: float = 0.5
    v0: float = 0.5
    domain: tuple = (-8.0, 8.0)
    n_x: int = 801
    n_t: int = 3001
    levels: int = 3
    small_sigma: float = 0.1
    var_n: int = 2000


def _check(name, measured, tol, passed, **extra):
    return {"name": name, "measured": measured, "tolerance": tol, "passed": bool(passed), **extra}


def _orders(errs):
    errs = np.asarray(errs, dtype=float)
    return [float(np.log2(errs[k] / errs[k + 1])) for k in range(len(errs) - 1)]


def _levels(cfg: VerifyConfig):
    """Grid levels ending at ``(n_x, n_t)``, each half the spacing of the last."""
    out = []
    nx, nt = cfg.n_x, cfg.n_t
    for _ in range(cfg.levels):
        out.append((nx, nt))
        nx, nt = (nx + 1) // 2, (nt - 1) // 2 + 1
    return out[::-1]


def run_verification(cfg: Optional[VerifyConfig] = None) -> list:
    """Run every grid check; returns a list of ``{name, measured, tolerance, passed}``."""
    cfg = cfg or VerifyConfig()
    spec = SDESpec(cfg.a, 0.0, cfg.sigma, cfg.T, 1)
    levels = _levels(cfg)
    report = []

    # Fokker-Planck against the analytic OU law
    l1, mass_dev = [], 0.0
    fp_fields = []
    for nx, nt in levels:
        x, h = cell_grid(nx, cfg.domain)
        sol = fp_solve_1d(spec, gaussian_eta_1d(spec, cfg.mu0, cfg.v0, x, 0.0), nx, nt, cfg.domain)
        mass_dev = max(mass_dev, float(np.max(np.abs(sol.masses() - sol.masses()[0]))))
        exact = gaussian_eta_1d(spec, cfg.mu0, cfg.v0, x, cfg.T)
        l1.append(float(h * np.abs(sol.values[-1] - exact).sum()))
        fp_fields.append(sol)
    order = _orders(l1)[-1]
    report.append(_check("fp_mass_conservation", mass_dev, 1e-8, mass_dev <= 1e-8))
    report.append(_check("fp_l1_order", order, "|order - 2| <= 0.3", abs(order - 2.0) <= 0.3, errors=l1))

    # heat kernel: f = 0, sigma = sqrt(2), variance grows by 2 s
    heat = SDESpec(0.0, 0.0, np.sqrt(2.0), 1.0, 1)
    x, h = cell_grid(cfg.n_x, cfg.domain)
    sol = fp_solve_1d(heat, norm.pdf(x, 0.0, 0.2), cfg.n_x, 1001, cfg.domain)
    var = float(h * np.sum(sol.values[-1] * x * x))
    report.append(_check("heat_kernel_variance", abs(var - (0.04 + 2.0)), 1e-3, abs(var - 2.04) <= 1e-3))

    # HJB residual of U = -log eta: analytic eta (order) and solver eta (decrease)
    res_a, res_fp = [], []
    for (nx, nt), sol in zip(levels, fp_fields):
        res_a.append(hjb_residual_1d(gaussian_eta_field(spec, cfg.mu0, cfg.v0, nx, nt, cfg.domain), spec)[1])
        res_fp.append(hjb_residual_1d(sol, spec, threshold=1e-6)[1])
    o = min(_orders(res_a))
    report.append(_check("hjb_residual_analytic_order", o, ">= 1", o >= 1.0, residuals=res_a))
    dec = bool(np.all(np.diff(res_fp) < 0))
    report.append(_check("hjb_residual_fp_decreasing", res_fp[-1], "strictly decreasing", dec, residuals=res_fp))
    stat = SDESpec(cfg.a, 0.0, cfg.sigma, cfg.T, 1)
    st_field = gaussian_eta_field(stat, 0.0, stat.stationary()[1], cfg.n_x, cfg.n_t, cfg.domain)
    st_res = hjb_residual_1d(st_field, stat)[1]
    report.append(_check("hjb_residual_stationary", st_res, 1e-6, st_res <= 1e-6))

    # duality between controlled and uncontrolled Fokker-Planck
    for label, sig in (("", cfg.sigma), ("_small_sigma", cfg.small_sigma)):
        sp = SDESpec(cfg.a, 0.0, sig, cfg.T, 1)
        v0 = cfg.v0 if sig == cfg.sigma else sp.stationary()[1] * 4.0
        dev = [duality_check_1d(gaussian_eta_field(sp, cfg.mu0, v0, nx, nt, cfg.domain), sp) for nx, nt in levels]
        ok = bool(np.all(np.diff(dev) < 0))
        report.append(_check("duality_decreasing" + label, dev[-1], "strictly decreasing", ok,
                             deviations=dev, orders=_orders(dev)))
    z = duality_check_1d(gaussian_eta_field(spec, cfg.mu0, cfg.v0, 101, 1, cfg.domain, T=0.0), spec)
    report.append(_check("duality_zero_horizon", z, 0.0, z == 0.0))

    # first variations of the terminal and interaction functionals
    x, h = cell_grid(cfg.var_n, cfg.domain)
    rho = 0.6 * norm.pdf(x, -0.7, 0.8) + 0.4 * norm.pdf(x, 1.0, 0.6)
    rho /= h * rho.sum()
    psi = np.sin(1.3 * x) + 0.3 * x
    chi = rho * (psi - h * np.sum(rho * psi))
    log_pi = norm.logpdf(x, 0.3, 1.2)
    # the cross-entropy is linear, so only central-difference round-off remains
    for tag, tol in (("kl", 1e-4), ("cross_entropy", 1e-9), ("fisher", 1e-3)):
        d, inner, err = variational_derivative_check(tag, x, rho, chi, 1e-4, cfg.sigma, log_pi=log_pi)
        report.append(_check(f"variational_{tag}", err, tol, err <= tol, directional=d, inner=inner))
    return report


def write_report(path, report, extra=None):
    payload = {"checks": report, "all_passed": all(c["passed"] for c in report)}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, default=float))
    return path
