"""Training objectives, HJB regularizers and Hamiltonian utilities.

Every objective has a traceable core working on ``jnp`` batches (used by the
trainer under ``jit``) and a public wrapper that takes a
:class:`~mfglab.targets.ParticleEnsemble` and a seed.  Time integrals over
``[0, T]`` are estimated by ``T`` times the mean over uniform noising times,
one time per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from .autodiff import MLPParams, Model, model_bundle, model_value
from .dynamics import SDESpec, cnf_path, eta_score_fn, perturb
from .errors import ConfigError, DivergedSimulationError, DomainError, IllPosedHamiltonianError, ShapeError, UnsupportedError
from .targets import ParticleEnsemble, TargetDistribution


@dataclass(frozen=True)
class RegularizerConfig:
    """Weights of the score-matching term (``alpha0``), the HJB residual
    (``alpha1``) and the terminal condition (``alpha2``); ``p`` is the
    residual exponent.

    ``measure='eta'`` evaluates the residual on exactly noised data;
    ``'uniform'`` draws points uniformly on ``[-box, box]^d`` instead.
    """

    alpha0: float = 1.0
    alpha1: float = 0.0
    alpha2: float = 0.0
    p: int = 2
    measure: str = "eta"
    box: float = 4.0

    def __post_init__(self):
        a = (self.alpha0, self.alpha1, self.alpha2)
        if min(a) < 0 or not all(np.isfinite(a)):
            raise ConfigError("regularizer weights must be finite and nonnegative")
        if max(a) == 0:
            raise ConfigError("at least one of alpha0, alpha1, alpha2 must be positive")
        if self.p not in (1, 2):
            raise ConfigError(f"p must be 1 or 2, got {self.p!r}")
        if self.measure not in ("eta", "uniform"):
            raise ConfigError(f"unknown residual measure {self.measure!r}")


def _pow(r, p):
    # |r| as r*sign(r) so the p=1 subgradient at exactly 0 is 0
    return r * jnp.sign(r) if p == 1 else r * r


def _draws(spec: SDESpec, data, batch_times, rng_seed):
    """Noising times and standard normals for a batch, both from one seed."""
    x0 = jnp.asarray(data.states if isinstance(data, ParticleEnsemble) else data, dtype=jnp.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise DomainError("empty batch")
    if x0.shape[1] != spec.d:
        raise ShapeError(f"data dimension {x0.shape[1]} does not match spec.d={spec.d}")
    rng = np.random.default_rng(rng_seed)
    n = x0.shape[0]
    if batch_times is None:
        s = rng.uniform(0.0, spec.T, n)
    else:
        s = np.broadcast_to(np.asarray(batch_times, dtype=float), (n,))
        if np.any(s < 0) or np.any(s > spec.T):
            raise DomainError(f"noising times must lie in [0, {spec.T}]")
    z = rng.standard_normal(x0.shape)
    return x0, jnp.asarray(s), jnp.asarray(z)


def _noised(spec, x0, s, z):
    return perturb(spec, x0, s, z)


# ---------------------------------------------------------------- score matching

def ism_terms(net: Model, spec: SDESpec, y, s):
    """Per-sample ``T sigma^2 (|s_theta|^2 / 2 + div s_theta)`` at noised points."""
    b = model_bundle(net, y, s, second=False)
    return spec.T * spec.sigma**2 * (0.5 * jnp.sum(b.value**2, axis=-1) + b.divergence)


def esm_terms(net: Model, score_fn: Callable, spec: SDESpec, y, s):
    """Per-sample ``T sigma^2 |s_theta - grad log eta|^2 / 2``."""
    ref = jax.vmap(score_fn)(y, s)
    diff = model_value(net, y, s) - ref
    return 0.5 * spec.T * spec.sigma**2 * jnp.sum(diff * diff, axis=-1)


def _resolve_score(analytic_score, spec):
    if isinstance(analytic_score, TargetDistribution):
        if not analytic_score.has_score:
            raise UnsupportedError("explicit score matching needs a target with an analytic score")
        return eta_score_fn(spec, analytic_score)
    if not callable(analytic_score):
        raise UnsupportedError("analytic_score must be a callable or a smooth target")
    return analytic_score


def ism_samples(net, data, batch_times=None, rng_seed=0, spec: Optional[SDESpec] = None):
    spec = spec or SDESpec.ou(d=_dim(data))
    x0, s, z = _draws(spec, data, batch_times, rng_seed)
    return np.asarray(ism_terms(net, spec, _noised(spec, x0, s, z), s))


def esm_samples(net, analytic_score, data, batch_times=None, rng_seed=0, spec: Optional[SDESpec] = None):
    spec = spec or SDESpec.ou(d=_dim(data))
    fn = _resolve_score(analytic_score, spec)
    x0, s, z = _draws(spec, data, batch_times, rng_seed)
    return np.asarray(esm_terms(net, fn, spec, _noised(spec, x0, s, z), s))


def ism_loss(net, data, batch_times=None, rng_seed=0, spec: Optional[SDESpec] = None) -> float:
    """Implicit score matching: ``T E_s E_eta[sigma^2 (|s|^2/2 + div s)]``."""
    return float(np.mean(ism_samples(net, data, batch_times, rng_seed, spec)))


def esm_loss(net, analytic_score, data, batch_times=None, rng_seed=0, spec: Optional[SDESpec] = None) -> float:
    """Explicit score matching against ``analytic_score(y, s)`` (or a smooth target)."""
    return float(np.mean(esm_samples(net, analytic_score, data, batch_times, rng_seed, spec)))


def _dim(data):
    return (data.states if isinstance(data, ParticleEnsemble) else np.atleast_2d(data)).shape[1]


# ---------------------------------------------------------------- HJB residuals

def r1_residual(net: Model, spec: SDESpec, y, s):
    """Componentwise residual of the gradient of the noising HJB, shape ``(n, d)``.

    For ``f = a x + b``: ``df^T/dx_i s = a s_i`` and ``grad(div f) = 0``.
    """
    bd = model_bundle(net, y, s, second=True)
    J = bd.jacobian_x  # J[n, j, i] = d s_j / d x_i
    f = spec.drift(y)
    sig2 = spec.sigma**2
    return (bd.time_partial
            - spec.a * bd.value
            - jnp.einsum("nj,nji->ni", f, J)
            - sig2 * jnp.einsum("nj,nji->ni", bd.value, J)
            - 0.5 * sig2 * bd.component_laplacians)


def r2_residual(potential: Model, spec: SDESpec, y, s):
    """Residual of the log-density HJB for a scalar ``phi``, shape ``(n,)``."""
    bd = model_bundle(potential, y, s, second=True)
    g = bd.jacobian_x[:, 0, :]
    f = spec.drift(y)
    sig2 = spec.sigma**2
    return (bd.time_partial[:, 0] - jnp.sum(f * g, axis=-1) - 0.5 * sig2 * jnp.sum(g * g, axis=-1)
            - spec.div_drift - 0.5 * sig2 * bd.component_laplacians[:, 0])


def terminal_score_terms(net: Model, x0):
    """``|s(y,0)|^2 + 2 div s(y,0)`` per data sample."""
    b = model_bundle(net, x0, jnp.zeros(x0.shape[0]), second=False)
    return jnp.sum(b.value**2, axis=-1) + 2.0 * b.divergence


def terminal_potential_terms(potential: Model, x0):
    """``|grad phi(y,0)|^2 + 2 lap phi(y,0)`` per data sample."""
    b = model_bundle(potential, x0, jnp.zeros(x0.shape[0]), second=True)
    g = b.jacobian_x[:, 0, :]
    return jnp.sum(g * g, axis=-1) + 2.0 * b.component_laplacians[:, 0]


def r1_value(net, spec, cfg: RegularizerConfig, x0, y, s):
    """``alpha1 T mean(sum_i |res_i|^p) + alpha2 mean(terminal)`` (traceable)."""
    out = 0.0
    if cfg.alpha1:
        out = out + cfg.alpha1 * spec.T * jnp.mean(jnp.sum(_pow(r1_residual(net, spec, y, s), cfg.p), axis=-1))
    if cfg.alpha2:
        out = out + cfg.alpha2 * jnp.mean(terminal_score_terms(net, x0))
    return out


def r2_value(potential, spec, cfg: RegularizerConfig, x0, y, s):
    out = 0.0
    if cfg.alpha1:
        out = out + cfg.alpha1 * spec.T * jnp.mean(_pow(r2_residual(potential, spec, y, s), cfg.p))
    if cfg.alpha2:
        out = out + cfg.alpha2 * jnp.mean(terminal_potential_terms(potential, x0))
    return out


def residual_points(spec, cfg, x0, s, z, key_u=None):
    """Points where the HJB residual is evaluated: noised data or a uniform box."""
    if cfg.measure == "eta":
        return _noised(spec, x0, s, z)
    # reuse the normals through the normal CDF so a batch needs no extra draws
    u = jax.scipy.special.ndtr(z)
    return cfg.box * (2.0 * u - 1.0)


def hjb_r1(net: Model, spec: SDESpec, data, cfg: RegularizerConfig, rng_seed=0, batch_times=None) -> float:
    """HJB regularizer on a vector score network."""
    if isinstance(net, MLPParams) and net.d_out != net.d:
        raise ShapeError("score network must have d_out == d")
    x0, s, z = _draws(spec, data, batch_times, rng_seed)
    return float(r1_value(net, spec, cfg, x0, residual_points(spec, cfg, x0, s, z), s))


def hjb_r2(potential: Model, spec: SDESpec, data, cfg: RegularizerConfig, rng_seed=0, batch_times=None) -> float:
    """HJB regularizer on a scalar log-density network ``phi`` with ``s = grad phi``."""
    if isinstance(potential, MLPParams) and potential.d_out != 1:
        raise ShapeError("log-density network must have scalar output")
    x0, s, z = _draws(spec, data, batch_times, rng_seed)
    return float(r2_value(potential, spec, cfg, x0, residual_points(spec, cfg, x0, s, z), s))


def sgm_objective(net, spec: SDESpec, cfg: RegularizerConfig, x0, s, z, scalar=False):
    """``alpha0 ISM + R`` for one batch (traceable).

    With ``scalar=True`` the network is a log-density ``phi`` and the score is
    its gradient; the regularizer is then the scalar HJB form.
    """
    y = _noised(spec, x0, s, z)
    out = 0.0
    if scalar:
        if cfg.alpha0:
            b = model_bundle(net, y, s, second=True)
            g = b.jacobian_x[:, 0, :]
            out = cfg.alpha0 * spec.T * spec.sigma**2 * jnp.mean(
                0.5 * jnp.sum(g * g, axis=-1) + b.component_laplacians[:, 0])
        if cfg.alpha1 or cfg.alpha2:
            out = out + r2_value(net, spec, cfg, x0, residual_points(spec, cfg, x0, s, z), s)
        return out
    if cfg.alpha0:
        out = cfg.alpha0 * jnp.mean(ism_terms(net, spec, y, s))
    if cfg.alpha1 or cfg.alpha2:
        out = out + r1_value(net, spec, cfg, x0, residual_points(spec, cfg, x0, s, z), s)
    return out


# ---------------------------------------------------------------- CNF objectives

def std_normal_logpdf(x):
    return -0.5 * jnp.sum(x * x, axis=-1) - 0.5 * x.shape[-1] * jnp.log(2.0 * jnp.pi)


def _n_steps(T, dt):
    n = int(round(T / dt))
    if not dt > 0 or n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ConfigError(f"dt={dt} must be positive and divide T={T}")
    return n


def otflow_terms(potential: Model, x, T, n_steps):
    """Per-sample ``(nll, transport, hjb, latent)`` of the potential flow from data.

    ``nll = -log rho_ref(x(T)) + int lap U dt`` is the negative model
    log-likelihood, ``transport = int |grad U|^2 / 2 dt`` and
    ``hjb = int |dU/dt - |grad U|^2 / 2| dt``, all along ``x(t)`` from
    ``x(0) = x``.
    """
    z, acc, _ = cnf_path(potential, x, 0.0, T, n_steps)
    nll = -std_normal_logpdf(z) - acc[:, 0]
    return nll, acc[:, 1], acc[:, 2], z


def otflow_value(potential, x, alpha1, T, n_steps, transport_weight=1.0):
    nll, kin, hjb, _ = otflow_terms(potential, x, T, n_steps)
    return jnp.mean(nll + transport_weight * kin + alpha1 * hjb)


def otflow_objective(potential: Model, data, alpha1=0.0, dt=0.1, T=1.0, transport_weight=1.0) -> float:
    """Negative log-likelihood plus transport cost plus ``alpha1`` times the
    path-integrated HJB residual (terminal HJB weight fixed to 0).

    ``transport_weight`` scales the kinetic term; it is equivalent to
    rescaling the horizon and leaves the HJB residual form unchanged.
    """
    if alpha1 < 0 or transport_weight < 0:
        raise ConfigError("alpha1 and transport_weight must be nonnegative")
    x = jnp.asarray(data.states if isinstance(data, ParticleEnsemble) else data, dtype=jnp.float64)
    val = float(otflow_value(potential, x, alpha1, T, _n_steps(T, dt), transport_weight))
    if not np.isfinite(val):
        raise DivergedSimulationError("OT-flow trajectories became non-finite")
    return val


def otbg_terms(potential, x_data, z_ref, lam, target_logdensity, T, n_steps):
    """``(forward KL, reverse KL, transport)`` batch estimates, each up to the
    additive constant of ``target_logdensity``."""
    out_f = out_r = tr_f = tr_g = 0.0
    if lam > 0:
        nll, kin, _, _ = otflow_terms(potential, x_data, T, n_steps)
        out_f = jnp.mean(jax.vmap(target_logdensity)(x_data) + nll)
        tr_f = jnp.mean(kin)
    if lam < 1:
        x, acc, _ = cnf_path(potential, z_ref, T, 0.0, n_steps)
        log_model = std_normal_logpdf(z_ref) - acc[:, 0]
        out_r = jnp.mean(log_model - jax.vmap(target_logdensity)(x))
        tr_g = jnp.mean(acc[:, 1])
    return out_f, out_r, lam * tr_f + (1.0 - lam) * tr_g


def otbg_value(potential, x_data, z_ref, lam, target_logdensity, T, n_steps, transport_weight=1.0):
    fwd, rev, tr = otbg_terms(potential, x_data, z_ref, lam, target_logdensity, T, n_steps)
    return lam * fwd + (1.0 - lam) * rev + transport_weight * tr


def otbg_objective(potential: Model, data, lam, target_logdensity: Callable, dt=0.1, T=1.0,
                   n_ref=None, rng_seed=0, transport_weight=1.0, return_terms=False):
    """Two-sided KL terminal cost ``lam KL(pi||rho) + (1-lam) KL(rho||pi)``
    plus transport.

    The forward term uses the change-of-variables likelihood of the data;
    the reverse term flows ``n_ref`` reference draws back to ``t=0`` and
    compares model log-density with ``target_logdensity`` (single point,
    traceable, known up to a constant).  The transport cost is averaged
    over both sets of trajectories with the same convex weights.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    x = jnp.asarray(data.states if isinstance(data, ParticleEnsemble) else data, dtype=jnp.float64)
    n_ref = x.shape[0] if n_ref is None else n_ref
    z = jnp.asarray(np.random.default_rng(rng_seed).standard_normal((n_ref, x.shape[1])))
    n_steps = _n_steps(T, dt)
    fwd, rev, tr = otbg_terms(potential, x, z, lam, target_logdensity, T, n_steps)
    total = lam * fwd + (1.0 - lam) * rev + transport_weight * tr
    if return_terms:
        return float(total), {"forward_kl": float(fwd), "reverse_kl": float(rev), "transport": float(tr)}
    return float(total)


def bounded_velocity_regularizer(potential: Model, x, t, c, alpha1, alpha2=0.0, T=1.0,
                                 x_terminal=None, log_ratio_terminal=None):
    """HJB regularizer for flows with velocities in a ball of radius ``c``.

    ``alpha1 T mean|dU/dt - c |grad U||`` over samples ``(x, t)`` plus
    ``alpha2 mean|U(x,T) - (1 + log(rho/rho_ref))|`` over terminal samples
    with the log-ratio supplied by the caller.
    """
    if c <= 0:
        raise ConfigError("velocity bound c must be positive")
    x = jnp.asarray(x, dtype=jnp.float64)
    t = jnp.broadcast_to(jnp.asarray(t, dtype=jnp.float64), (x.shape[0],))
    b = model_bundle(potential, x, t, second=False)
    g = b.jacobian_x[:, 0, :]
    out = alpha1 * T * jnp.mean(jnp.abs(b.time_partial[:, 0] - c * jnp.sqrt(jnp.sum(g * g, axis=-1))))
    if alpha2:
        if x_terminal is None or log_ratio_terminal is None:
            raise ConfigError("terminal term needs samples and the log density ratio")
        xt = jnp.asarray(x_terminal, dtype=jnp.float64)
        u = model_value(potential, xt, jnp.full((xt.shape[0],), T))[:, 0]
        out = out + alpha2 * jnp.mean(jnp.abs(u - (1.0 + jnp.asarray(log_ratio_terminal))))
    return float(out)


# ---------------------------------------------------------------- Hamiltonians

_H_FOR_L = {
    "kinetic": "quadratic",
    "sgm": "sgm",
    "prob_flow": "prob_flow",
    "zero_bounded": "bounded_velocity",
    "zero": "unbounded",
}


@dataclass(frozen=True)
class MFGIngredients:
    """Symbols of one generative model viewed as a mean-field game.

    ``running_cost`` tags: ``kinetic`` (|v|^2/2), ``sgm`` (|v|^2/2 - div f),
    ``prob_flow`` (|v|^2/2 - div f / 2), ``zero_bounded`` (0 on the ball
    ``|v| <= c``) and ``zero`` (0, unconstrained).  Controlled dynamics are
    ``dx = (f + sigma v) dt`` with ``f, sigma`` from ``spec`` for the
    diffusion models and ``dx = v dt`` otherwise.
    """

    model: str
    terminal: str
    interaction: str
    running_cost: str
    dynamics: str
    hamiltonian: str
    c: float = 1.0
    spec: Optional[SDESpec] = field(default=None)

    def __post_init__(self):
        expect = _H_FOR_L.get(self.running_cost)
        if expect is None:
            raise ConfigError(f"unknown running cost {self.running_cost!r}")
        if self.hamiltonian != expect:
            raise ConfigError(f"running cost {self.running_cost!r} implies Hamiltonian {expect!r}")
        if self.running_cost in ("sgm", "prob_flow") and self.spec is None:
            raise ConfigError("diffusion ingredients need an SDESpec")
        if self.dynamics not in ("ODE", "SDE"):
            raise ConfigError("dynamics must be 'ODE' or 'SDE'")

    def drift(self, x):
        return np.zeros_like(x) if self.spec is None else self.spec.a * x + self.spec.b

    @property
    def sigma(self) -> float:
        return 1.0 if self.spec is None else self.spec.sigma

    def running(self, x, v):
        """``L(x, v)`` for velocities ``v`` of shape ``(m, d)``; ``inf`` off ``K``."""
        sq = 0.5 * np.sum(v * v, axis=-1)
        if self.running_cost == "kinetic":
            return sq
        if self.running_cost == "sgm":
            return sq - self.spec.a * len(x)
        if self.running_cost == "prob_flow":
            return sq - 0.5 * self.spec.a * len(x)
        zero = np.zeros(v.shape[0])
        if self.running_cost == "zero_bounded":
            return np.where(np.linalg.norm(v, axis=-1) <= self.c * (1 + 1e-12), zero, np.inf)
        return zero

    @property
    def bounded(self) -> bool:
        return self.running_cost == "zero_bounded"


def ot_flow_ingredients():
    return MFGIngredients("ot_flow", "kl_to_ref", "none", "kinetic", "ODE", "quadratic")


def cnf_ingredients():
    return MFGIngredients("cnf", "kl_to_ref", "none", "zero", "ODE", "unbounded")


def bounded_flow_ingredients(c=1.0):
    return MFGIngredients("bounded_nf", "kl_to_ref", "none", "zero_bounded", "ODE", "bounded_velocity", c=c)


def sgm_ingredients(spec: SDESpec):
    return MFGIngredients("sgm", "cross_entropy", "none", "sgm", "SDE", "sgm", spec=spec)


def prob_flow_ingredients(spec: SDESpec):
    return MFGIngredients("prob_flow", "cross_entropy", "fisher", "prob_flow", "ODE", "prob_flow", spec=spec)


def hamiltonian(ing: MFGIngredients, x, p) -> float:
    """Closed-form ``H(x, p) = sup_v [-p.(f + sigma v) - L(x, v)]``."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    pp = float(p @ p)
    if ing.hamiltonian == "quadratic":
        return 0.5 * pp
    if ing.hamiltonian == "bounded_velocity":
        return ing.c * np.sqrt(pp)
    if ing.hamiltonian in ("sgm", "prob_flow"):
        div = ing.spec.a * len(x)
        scale = 1.0 if ing.hamiltonian == "sgm" else 0.5
        return float(-ing.drift(x) @ p + 0.5 * ing.sigma**2 * pp + scale * div)
    raise IllPosedHamiltonianError("sup over an unbounded velocity set with zero running cost is infinite")


def velocity_grid(ing: MFGIngredients, p, n=201, radius=None):
    """Default search grid for :func:`legendre_sup` and its resolution bound.

    Quadratic costs use a box centred on the maximizer's scale with spacing
    ``h``; the bound ``d h^2 / 8`` is the worst gap of a unit-curvature
    concave quadratic.  The bounded-velocity ball (``d = 2``) uses a polar
    grid whose rim is sampled at ``n`` angles, bounded by
    ``c |p| (1 - cos(pi / n))``.
    """
    p = np.asarray(p, dtype=float)
    d = p.shape[0]
    if ing.bounded:
        if d != 2:
            raise UnsupportedError("default bounded-velocity grid is two-dimensional")
        th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        r = np.linspace(0.0, ing.c, max(n // 4, 2))
        grid = (r[:, None, None] * np.stack([np.cos(th), np.sin(th)], -1)[None]).reshape(-1, 2)
        return grid, ing.c * np.linalg.norm(p) * (1.0 - np.cos(np.pi / n)) + 1e-12
    if radius is None:
        radius = 2.0 * ing.sigma * np.abs(p).max() + 1.0
    m = max(int(round(n ** (2.0 / d))) if d > 2 else n, 3)
    axis = np.linspace(-radius, radius, m)
    grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), -1).reshape(-1, d)
    h = axis[1] - axis[0]
    return grid, d * h * h / 8.0 + 1e-12


def _grid_max(ing, x, p, grid):
    vals = -(grid * ing.sigma + ing.drift(x)) @ p - ing.running(x, grid)
    k = int(np.argmax(vals))
    return vals[k], k


def legendre_sup(ing: MFGIngredients, x, p, v_grid=None, n=201) -> float:
    """Grid maximum of ``-p.(f + sigma v) - L(x, v)``.

    For an unconstrained velocity set the search is repeated on the grid
    scaled by 2; a maximizer on the outer edge whose value keeps growing
    means the supremum is infinite and raises
    :class:`IllPosedHamiltonianError`.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    if v_grid is None:
        v_grid, _ = velocity_grid(ing, p, n)
    v_grid = np.asarray(v_grid, dtype=float)
    val, k = _grid_max(ing, x, p, v_grid)
    if not ing.bounded:
        rim = np.max(np.abs(v_grid), axis=0)
        on_edge = np.any(np.isclose(np.abs(v_grid[k]), rim))
        if on_edge:
            val2, _ = _grid_max(ing, x, p, 2.0 * v_grid)
            if val2 > val + 1e-9 * max(1.0, abs(val)):
                raise IllPosedHamiltonianError(
                    f"grid supremum grows with the grid ({val:.4g} -> {val2:.4g}); velocity set must be bounded")
    return float(val)
