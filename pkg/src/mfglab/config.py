"""Line-oriented ``key = value`` experiment configuration."""

from __future__ import annotations

import hashlib
from importlib import resources
from pathlib import Path

import numpy as np

from .dynamics import SDESpec
from .errors import ConfigError
from .targets import TargetDistribution, checkerboard, gaussian, gaussian_mixture

# keys named by the experiment surface; everything after them is an extension
CORE_KEYS = (
    "target.kind", "sde.a", "sde.sigma", "sde.T", "train.batches", "train.batch_size", "train.lr",
    "train.seed", "loss.alpha0", "loss.alpha1", "loss.alpha2", "loss.p", "net.hidden", "net.width",
    "net.activation", "sim.dt", "sample.n",
)
EXTRA_KEYS = (
    "sde.b", "loss.measure", "loss.network", "train.eval_every", "train.chunk", "train.checkpoint_every",
    "sample.method", "sample.seed", "sample.checkpoint", "sample.reference_n", "sample.reference_seed",
    "cnf.objective", "cnf.lambda", "cnf.transport_weight", "cnf.T", "cnf.train_dt", "cnf.n_ref",
    "wgf.steps", "wgf.stride", "wgf.init_var",
    "verify.n_x", "verify.n_t", "verify.levels", "verify.T", "verify.mu0", "verify.v0", "verify.small_sigma",
    "metrics.x", "metrics.y", "metrics.bandwidth", "figure.input", "figure.png",
)
TARGET_PARAMS = ("mean", "cov", "means", "covs", "weights", "n_cells", "cell", "origin")


def _known(key: str) -> bool:
    if key in CORE_KEYS or key in EXTRA_KEYS:
        return True
    return key.startswith("target.params.") and key.split(".", 2)[2] in TARGET_PARAMS


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown or
    repeated keys are rejected with the line number."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _known(key):
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if not _known(key):
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = value
    return cfg


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("mfglab.presets").iterdir() if p.name.endswith(".cfg"))


def load_preset(name: str) -> str:
    f = resources.files("mfglab.presets") / f"{name}.cfg"
    if not f.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return f.read_text()


def load_config(path=None, preset=None, overrides=None) -> dict:
    cfg = {}
    if preset:
        cfg.update(parse_config(load_preset(preset), f"preset:{preset}"))
    if path:
        cfg.update(parse_config(Path(path).read_text(), str(path)))
    return apply_overrides(cfg, overrides)


def canonical_text(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_text(cfg).encode()).hexdigest()


class Resolver:
    """Typed access that names the missing key."""

    def __init__(self, cfg: dict):
        self.cfg = cfg

    def require(self, *keys):
        missing = [k for k in keys if k not in self.cfg]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}")

    def _get(self, key, default, conv):
        if key not in self.cfg:
            if default is _REQUIRED:
                raise ConfigError(f"missing required key {key!r}")
            return default
        try:
            return conv(self.cfg[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {self.cfg[key]!r}") from exc

    def float(self, key, default=None):
        return self._get(key, _REQUIRED if default is None else default, float)

    def int(self, key, default=None):
        return self._get(key, _REQUIRED if default is None else default, _int)

    def str(self, key, default=None):
        return self._get(key, _REQUIRED if default is None else default, str)

    def bool(self, key, default=None):
        return self._get(key, _REQUIRED if default is None else default, _bool)

    def array(self, key, default=None):
        return self._get(key, _REQUIRED if default is None else default, _array)


_REQUIRED = object()


def _int(v):
    f = float(v)
    if f != int(f):
        raise ValueError(v)
    return int(f)


def _bool(v):
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _array(v):
    """``1,2`` is a vector; ``1,0;0,1`` a matrix (rows split by ``;``)."""
    rows = [r for r in v.split(";") if r.strip()]
    vals = [[float(x) for x in r.split(",") if x.strip()] for r in rows]
    arr = np.asarray(vals, dtype=float)
    return arr[0] if len(rows) == 1 else arr


def build_target(r: Resolver) -> TargetDistribution:
    kind = r.str("target.kind")
    p = "target.params."
    if kind == "checkerboard":
        n = r.int(p + "n_cells", 4)
        cell = r.float(p + "cell", 1.0)
        return checkerboard(n, cell, r.float(p + "origin", -0.5 * n * cell))
    if kind == "gaussian":
        mean = np.atleast_1d(r.array(p + "mean"))
        cov = r.array(p + "cov", np.array(1.0))
        return gaussian(mean, cov if np.ndim(cov) != 1 else np.diag(cov))
    if kind == "gaussian_mixture":
        means = np.atleast_2d(r.array(p + "means"))
        covs = np.atleast_1d(r.array(p + "covs", np.ones(means.shape[0])))
        if covs.size == 1:
            covs = np.full(means.shape[0], float(covs.ravel()[0]))
        weights = r.array(p + "weights", np.full(means.shape[0], 1.0 / means.shape[0]))
        return gaussian_mixture(means, covs, np.atleast_1d(weights))
    raise ConfigError(f"target.kind must be checkerboard, gaussian or gaussian_mixture, not {kind!r}")


def build_spec(r: Resolver, d: int) -> SDESpec:
    return SDESpec(r.float("sde.a"), r.float("sde.b", 0.0), r.float("sde.sigma"), r.float("sde.T"), d)
