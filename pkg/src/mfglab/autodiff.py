"""Small dense networks with exact spatial derivatives.

The network maps ``(x, t) -> out`` with the time concatenated raw to the
state.  Spatial derivatives are propagated forward layer by layer: each
hidden unit carries its value, its gradient with respect to ``(x, t)`` and
its spatial Laplacian.  For a pre-activation ``a`` with gradient ``Ja`` and
Laplacian ``La`` the activated unit has

    J = act'(a) Ja,      L = act'(a) La + act''(a) |Ja_x|^2,

which is exact, costs ``O(d)`` extra work per unit and stays differentiable
with respect to the weights.  Parameter gradients of losses that contain
these derivatives are taken by reverse mode over the propagation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Union

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree
from jax.scipy.special import ndtr

from .errors import ShapeError, UnsupportedActivationError, UnsupportedGraphError

jax.config.update("jax_enable_x64", True)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# activations with continuous second derivative
SMOOTH_ACTIVATIONS = ("gelu", "tanh")
ACTIVATIONS = SMOOTH_ACTIVATIONS + ("relu",)


def gelu(x):
    """Exact GeLU, ``x * Phi(x)`` with the normal CDF from ``erf``."""
    return x * ndtr(x)


def _activation_jets(name, a, second=True):
    """Value, first and (optionally) second derivative of the activation at ``a``."""
    if name == "gelu":
        cdf = ndtr(a)
        pdf = _INV_SQRT_2PI * jnp.exp(-0.5 * a * a)
        d1 = cdf + a * pdf
        d2 = pdf * (2.0 - a * a) if second else None
        return a * cdf, d1, d2
    if name == "tanh":
        th = jnp.tanh(a)
        d1 = 1.0 - th * th
        d2 = -2.0 * th * d1 if second else None
        return th, d1, d2
    if name == "relu":
        if second:
            raise UnsupportedActivationError("relu is not twice differentiable")
        return jnp.maximum(a, 0.0), (a > 0).astype(a.dtype), None
    raise UnsupportedActivationError(f"unknown activation {name!r}")


@partial(
    jax.tree_util.register_dataclass,
    data_fields=["weights", "biases"],
    meta_fields=["activation", "seed"],
)
@dataclass(frozen=True)
class MLPParams:
    """Weights ``W_k`` of shape ``(fan_out, fan_in)`` and biases ``b_k``.

    The input dimension is ``d + 1`` (state plus time).  The activation is
    applied after every layer except the last.
    """

    weights: tuple
    biases: tuple
    activation: str = "gelu"
    seed: Optional[int] = field(default=None, compare=False)

    @property
    def d_in(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def d(self) -> int:
        return self.d_in - 1

    @property
    def d_out(self) -> int:
        return int(self.weights[-1].shape[0])

    @property
    def layer_sizes(self) -> list[int]:
        return [self.d_in] + [int(w.shape[0]) for w in self.weights]

    def validate(self) -> "MLPParams":
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        if self.activation not in ACTIVATIONS:
            raise UnsupportedActivationError(f"unknown activation {self.activation!r}")
        prev = self.weights[0].shape[1]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k} has inconsistent shapes {w.shape}, {b.shape}")
            prev = w.shape[0]
            if not (np.all(np.isfinite(np.asarray(w))) and np.all(np.isfinite(np.asarray(b)))):
                raise ShapeError(f"layer {k} has non-finite entries")
        return self


def init_mlp(d, d_out, hidden=2, width=32, activation="gelu", seed=0) -> MLPParams:
    """Uniform init on ``+-1/sqrt(fan_in)`` for weights and biases."""
    rng = np.random.default_rng(seed)
    sizes = [d + 1] + [width] * hidden + [d_out]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(jnp.asarray(rng.uniform(-bound, bound, (fan_out, fan_in))))
        biases.append(jnp.asarray(rng.uniform(-bound, bound, fan_out)))
    return MLPParams(tuple(weights), tuple(biases), activation, seed).validate()


def affine_mlp(A, c=None, d_time=None) -> MLPParams:
    """Single affine layer ``x -> A x + c`` (time column zero unless ``d_time`` given)."""
    A = jnp.asarray(A, dtype=jnp.float64)
    d_out, d = A.shape
    tcol = jnp.zeros((d_out, 1)) if d_time is None else jnp.asarray(d_time, dtype=jnp.float64).reshape(d_out, 1)
    W = jnp.concatenate([A, tcol], axis=1)
    c = jnp.zeros(d_out) if c is None else jnp.asarray(c, dtype=jnp.float64)
    return MLPParams((W,), (c,), "gelu", None)


class DerivativeBundle(NamedTuple):
    """Batched derivatives: ``value (n, d_out)``, ``jacobian_x (n, d_out, d)``,
    ``time_partial (n, d_out)`` and ``component_laplacians (n, d_out)``
    (``None`` for first-order requests)."""

    value: jnp.ndarray
    jacobian_x: jnp.ndarray
    time_partial: jnp.ndarray
    component_laplacians: Optional[jnp.ndarray]

    @property
    def divergence(self):
        return jnp.trace(self.jacobian_x, axis1=-2, axis2=-1)


Model = Union[MLPParams, Callable]


def _as_batch(x, t):
    x = jnp.asarray(x, dtype=jnp.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    t = jnp.asarray(t, dtype=jnp.float64)
    t = jnp.broadcast_to(t.reshape(-1) if t.ndim else t, (x.shape[0],))
    return x, t, single


def _check_dims(net: MLPParams, x):
    if x.shape[-1] != net.d:
        raise ShapeError(f"state has dimension {x.shape[-1]}, network expects {net.d}")


def mlp_apply(net: MLPParams, x, t):
    """Batched forward pass without derivative bookkeeping (jnp-traceable)."""
    h = jnp.concatenate([x, t[:, None]], axis=1)
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W.T + b
        if k < last:
            h = _activation_jets(net.activation, h, second=False)[0]
    return h


def forward(net: MLPParams, x, t):
    """Evaluate the network at one point (``x`` of shape ``(d,)``) or a batch."""
    x, t, single = _as_batch(x, t)
    _check_dims(net, x)
    out = mlp_apply(net, x, t)
    return out[0] if single else out


def mlp_bundle(net: MLPParams, x, t, second=True) -> DerivativeBundle:
    """Layerwise forward propagation of gradients and Laplacians (batched, traceable)."""
    n, d = x.shape
    h = jnp.concatenate([x, t[:, None]], axis=1)
    J = None  # identity for the input layer
    L = None
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W.T + b
        Ja = jnp.broadcast_to(W, (n,) + W.shape) if J is None else jnp.einsum("ij,njk->nik", W, J)
        La = None if not second else (jnp.zeros((n, W.shape[0])) if L is None else L @ W.T)
        if k == last:
            h, J, L = a, Ja, La
            break
        s0, s1, s2 = _activation_jets(net.activation, a, second)
        h = s0
        J = s1[..., None] * Ja
        if second:
            L = s1 * La + s2 * jnp.sum(Ja[..., :d] ** 2, axis=-1)
    return DerivativeBundle(h, J[..., :d], J[..., d], L)


def fn_bundle(fn: Callable, x, t, second=True) -> DerivativeBundle:
    """Same bundle for an arbitrary traceable ``fn(x_point, t_scalar) -> vector``."""

    def f(xi, ti):
        return jnp.atleast_1d(fn(xi, ti))

    def point(xi, ti):
        val = f(xi, ti)
        jx = jax.jacfwd(f, 0)(xi, ti)
        jt = jax.jacfwd(f, 1)(xi, ti)
        if not second:
            return val, jx, jt, None

        def second_dir(e):
            g = lambda y: jax.jvp(lambda u: f(u, ti), (y,), (e,))[1]
            return jax.jvp(g, (xi,), (e,))[1]

        lap = jnp.sum(jax.vmap(second_dir)(jnp.eye(xi.shape[0])), axis=0)
        return val, jx, jt, lap

    if second:
        v, jx, jt, lap = jax.vmap(point)(x, t)
    else:
        v, jx, jt = jax.vmap(lambda a, b: point(a, b)[:3])(x, t)
        lap = None
    return DerivativeBundle(v, jx, jt, lap)


def model_bundle(model: Model, x, t, second=True) -> DerivativeBundle:
    if isinstance(model, MLPParams):
        if second and model.activation not in SMOOTH_ACTIVATIONS and len(model.weights) > 1:
            raise UnsupportedActivationError(
                f"second derivatives need a C2 activation, got {model.activation!r}"
            )
        return mlp_bundle(model, x, t, second)
    return fn_bundle(model, x, t, second)


def model_value(model: Model, x, t):
    if isinstance(model, MLPParams):
        return mlp_apply(model, x, t)
    return jax.vmap(lambda a, b: jnp.atleast_1d(model(a, b)))(x, t)


def derivatives(model: Model, x, t, order="second") -> DerivativeBundle:
    """Value, spatial Jacobian, time partial and (for ``order='second'``) the
    Laplacian of every output component.

    ``model`` is an :class:`MLPParams` or a callable ``fn(x, t)`` on single
    points.  A single point returns unbatched arrays.
    """
    if order not in ("first", "second"):
        raise ValueError("order must be 'first' or 'second'")
    x, t, single = _as_batch(x, t)
    if isinstance(model, MLPParams):
        _check_dims(model, x)
    b = model_bundle(model, x, t, order == "second")
    if single:
        b = DerivativeBundle(*(None if a is None else a[0] for a in b))
    return b


def divergence(model: Model, x, t, method="exact", key=None, n_probes=1):
    """Divergence of a ``d -> d`` field.

    ``method='hutchinson'`` gives the unbiased Rademacher trace estimate; it
    is meant for ``d > 3`` and never used by the acceptance checks.
    """
    x, t, single = _as_batch(x, t)
    if isinstance(model, MLPParams):
        _check_dims(model, x)
        if model.d_out != model.d:
            raise ShapeError("divergence needs d_out == d")
    if method == "exact":
        out = model_bundle(model, x, t, second=False).divergence
    elif method == "hutchinson":
        if key is None:
            key = jax.random.PRNGKey(0)
        eps = jax.random.rademacher(key, (n_probes,) + x.shape, dtype=jnp.float64)

        def quad(e):
            _, jv = jax.jvp(lambda y: model_value(model, y, t), (x,), (e,))
            return jnp.sum(e * jv, axis=-1)

        out = jnp.mean(jax.vmap(quad)(eps), axis=0)
    else:
        raise ValueError(f"unknown divergence method {method!r}")
    return out[0] if single else out


def param_grad(loss: Callable[[MLPParams], jnp.ndarray], net: MLPParams) -> MLPParams:
    """Exact gradient of a scalar loss with respect to every weight and bias."""
    try:
        return jax.grad(loss)(net)
    except (jax.errors.ConcretizationTypeError, jax.errors.TracerArrayConversionError,
            jax.errors.TracerBoolConversionError, TypeError) as exc:
        raise UnsupportedGraphError(f"loss cannot be differentiated: {exc}") from exc


def ravel(net: MLPParams):
    """Flat parameter vector and the inverse map."""
    return ravel_pytree(net)


# ---------------------------------------------------------------- checkpoints

def _header(net: MLPParams, extra=None):
    h = {"layer_sizes": net.layer_sizes, "activation": net.activation, "seed": net.seed}
    if extra:
        h.update(extra)
    return h


def save_checkpoint(path, net: MLPParams, header_extra=None, arrays=None):
    """Write weights, biases and a JSON header to an ``.npz`` file."""
    path = Path(path)
    payload = {"header": np.array(json.dumps(_header(net, header_extra)))}
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        payload[f"W{k}"] = np.asarray(w)
        payload[f"b{k}"] = np.asarray(b)
    for name, arr in (arrays or {}).items():
        payload[f"x_{name}"] = np.asarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path, with_extras=False):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        n_layers = len(header["layer_sizes"]) - 1
        weights = tuple(jnp.asarray(z[f"W{k}"]) for k in range(n_layers))
        biases = tuple(jnp.asarray(z[f"b{k}"]) for k in range(n_layers))
        extras = {k[2:]: np.array(z[k]) for k in z.files if k.startswith("x_")}
    net = MLPParams(weights, biases, header["activation"], header.get("seed")).validate()
    if net.layer_sizes != header["layer_sizes"]:
        raise ShapeError("checkpoint header does not match stored arrays")
    if with_extras:
        return net, header, extras
    return net
