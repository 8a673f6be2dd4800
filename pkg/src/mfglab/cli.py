"""Command-line experiment runner.

Every subcommand writes into ``--out`` and leaves a ``manifest.json`` with
the config hash, seed and library versions.  No timestamps are recorded so
repeated runs produce identical artifact directories.
"""

from __future__ import annotations

import argparse
import json
import platform
import struct
import sys
import zlib
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as C
from .autodiff import save_checkpoint
from .cnf import CNFRun, generate_cnf, log_likelihood, roundtrip_error, train_cnf
from .dynamics import SDESpec, probability_flow_simulate, reverse_sde_simulate
from .errors import ConfigError, MFGLabError
from .losses import RegularizerConfig
from .metrics import metric_report
from .mfg_verify import VerifyConfig, run_verification, write_report
from .targets import read_ensemble_csv, sample as sample_target, write_ensemble_csv
from .trainer import TrainConfig, load_training_checkpoint, train, write_loss_trace
from .wgf import WGFRun, free_energy_trace, langevin_flow, write_trace_csv

SGM_KEYS = C.CORE_KEYS
CNF_KEYS = ("target.kind", "train.batches", "train.batch_size", "train.lr", "train.seed", "net.hidden",
            "net.width", "net.activation", "sample.n")
REFERENCE_SEED = 20240917
FIG_SIZE = 512
FIG_EXTENT = 3.0


# ---------------------------------------------------------------- artifacts

def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "jax", "jaxlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    try:
        out["mfglab"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        out["mfglab"] = None
    return out


def write_manifest(out: Path, command: str, cfg: dict, seed, artifacts):
    doc = {
        "command": command,
        "config_sha256": C.config_hash(cfg),
        "config": dict(sorted(cfg.items())),
        "seed": seed,
        "versions": _versions(),
        "artifacts": sorted(artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------- raster

def rasterize(X, size=FIG_SIZE, extent=FIG_EXTENT, radius=1):
    """White canvas with black points; axes fixed to ``[-extent, extent]^2``
    and the first coordinate horizontal."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] < 2:
        X = np.column_stack([X[:, 0], np.zeros(X.shape[0])])
    img = np.full((size, size, 3), 255, dtype=np.uint8)
    keep = np.all(np.isfinite(X[:, :2]), axis=1)
    col = np.floor((X[keep, 0] + extent) / (2 * extent) * size).astype(int)
    row = np.floor((extent - X[keep, 1]) / (2 * extent) * size).astype(int)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            r, c = row + dr, col + dc
            ok = (r >= 0) & (r < size) & (c >= 0) & (c < size)
            img[r[ok], c[ok]] = 0
    return img


def write_ppm(path, img):
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
    return path


def write_png(path, img):
    h, w, _ = img.shape

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    raw = b"".join(b"\x00" + img[i].tobytes() for i in range(h))
    body = chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
    body += chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n" + body)
    return path


# ---------------------------------------------------------------- config resolution

def _reg(r: C.Resolver, alpha0=None) -> RegularizerConfig:
    return RegularizerConfig(
        alpha0=r.float("loss.alpha0") if alpha0 is None else alpha0,
        alpha1=r.float("loss.alpha1"),
        alpha2=r.float("loss.alpha2"),
        p=r.int("loss.p"),
        measure=r.str("loss.measure", "eta"),
    )


def _train_config(r: C.Resolver, alpha0=None) -> TrainConfig:
    network = r.str("loss.network", "score")
    if network not in ("score", "potential"):
        raise ConfigError("loss.network must be 'score' or 'potential'")
    return TrainConfig(
        batches=r.int("train.batches"),
        batch_size=r.int("train.batch_size"),
        lr=r.float("train.lr"),
        seed=r.int("train.seed"),
        objective="sgm" if network == "score" else "sgm_scalar",
        reg=_reg(r, alpha0),
        hidden=r.int("net.hidden"),
        width=r.int("net.width"),
        activation=r.str("net.activation"),
        eval_every=r.int("train.eval_every", 100),
        chunk=r.int("train.chunk", 500),
        checkpoint_every=r.int("train.checkpoint_every", 0),
    )


def _score_model(params, spec: SDESpec, scalar: bool):
    """A potential network ``phi`` defines the score ``grad phi``."""
    if not scalar:
        return params
    import jax
    import jax.numpy as jnp
    from .autodiff import mlp_apply

    def score(x, s):
        return jax.grad(lambda y: jnp.sum(mlp_apply(params, y[None], jnp.atleast_1d(s))))(x)

    return score


def _simulate(spec, score, r: C.Resolver, seed):
    method = r.str("sample.method", "sde")
    n, dt = r.int("sample.n"), r.float("sim.dt")
    if method == "sde":
        return reverse_sde_simulate(spec, score, n, dt, seed)
    if method == "flow":
        return probability_flow_simulate(spec, score, n, dt, seed)
    raise ConfigError("sample.method must be 'sde' or 'flow'")


def _report(states, r: C.Resolver, target):
    ref = sample_target(target, r.int("sample.reference_n", 10000), r.int("sample.reference_seed", REFERENCE_SEED))
    bw = r.float("metrics.bandwidth", 0.0) or None
    return metric_report(states, ref.states, target, bw)


# ---------------------------------------------------------------- subcommands

def cmd_train_sgm(cfg, out: Path, pinn=False):
    r = C.Resolver(cfg)
    keys = [k for k in SGM_KEYS if not (pinn and k == "loss.alpha0")]
    r.require(*keys)
    if pinn and r.float("loss.alpha0", 0.0) != 0.0:
        raise ConfigError("train-pinn trains on the HJB regularizer only; loss.alpha0 must be 0")
    target = C.build_target(r)
    spec = C.build_spec(r, target.d)
    tc = _train_config(r, 0.0 if pinn else None)
    params, trace = train(tc, target, spec, checkpoint_path=out / "checkpoint.npz")
    write_loss_trace(out / "loss_trace.csv", trace)
    seed = r.int("sample.seed", tc.seed)
    ens = _simulate(spec, _score_model(params, spec, tc.objective == "sgm_scalar"), r, seed)
    write_ensemble_csv(out / "samples.csv", ens)
    _dump(out / "metrics.json", asdict(_report(ens.states, r, target)))
    return tc.seed, ["checkpoint.npz", "loss_trace.csv", "samples.csv", "metrics.json"]


def _cnf_run(r: C.Resolver, objective) -> CNFRun:
    if objective is None:
        objective = r.str("cnf.objective", "ot_bg")
    n_ref = r.int("cnf.n_ref", 0)
    return CNFRun(
        objective=objective,
        lam=r.float("cnf.lambda", 1.0),
        alpha1=r.float("loss.alpha1", 0.0),
        dt=r.float("cnf.train_dt", 0.25),
        T=r.float("cnf.T", 1.0),
        transport_weight=r.float("cnf.transport_weight", 0.05),
        hidden=r.int("net.hidden"),
        width=r.int("net.width"),
        activation=r.str("net.activation"),
        batches=r.int("train.batches"),
        batch_size=r.int("train.batch_size"),
        n_ref=n_ref or None,
        lr=r.float("train.lr"),
        seed=r.int("train.seed"),
        eval_every=r.int("train.eval_every", 100),
        chunk=r.int("train.chunk", 500),
    )


def cmd_train_cnf(cfg, out: Path, objective=None):
    r = C.Resolver(cfg)
    r.require(*CNF_KEYS)
    target = C.build_target(r)
    run = _cnf_run(r, objective)
    params, trace = train_cnf(run, target)
    header = {"cnf_run": {k: v for k, v in asdict(run).items()}}
    save_checkpoint(out / "checkpoint.npz", params, header)
    write_loss_trace(out / "loss_trace.csv", trace)
    dt = r.float("sim.dt", 0.01)
    seed = r.int("sample.seed", run.seed)
    ens, _ = generate_cnf(params, r.int("sample.n"), dt, seed, target.d, run.T)
    write_ensemble_csv(out / "samples.csv", ens)
    rep = asdict(_report(ens.states, r, target))
    data = sample_target(target, 2000, r.int("sample.reference_seed", REFERENCE_SEED) + 1).states
    rep["data_log_likelihood"] = float(np.mean(log_likelihood(params, data, dt, run.T)))
    rep["roundtrip_error"] = roundtrip_error(params, data[:500], dt, run.T)
    _dump(out / "metrics.json", rep)
    return run.seed, ["checkpoint.npz", "loss_trace.csv", "samples.csv", "metrics.json"]


def cmd_run_wgf(cfg, out: Path):
    r = C.Resolver(cfg)
    r.require("target.kind", "sim.dt", "sample.n", "train.seed")
    target = C.build_target(r)
    run = WGFRun(target, n=r.int("sample.n"), dt=r.float("sim.dt"), steps=r.int("wgf.steps", 300),
                 stride=r.int("wgf.stride", 10), seed=r.int("train.seed"), init_var=r.float("wgf.init_var", 1.0))
    snaps = langevin_flow(run)
    vals, _ = free_energy_trace(snaps, target)
    write_trace_csv(out / "loss_trace.csv", [k * run.stride for k in range(len(snaps))], vals)
    write_ensemble_csv(out / "samples.csv", snaps[-1])
    _dump(out / "metrics.json", asdict(_report(snaps[-1].states, r, target)))
    return run.seed, ["loss_trace.csv", "samples.csv", "metrics.json"]


def cmd_sample(cfg, out: Path):
    r = C.Resolver(cfg)
    r.require("sample.checkpoint", "sde.a", "sde.sigma", "sde.T", "sim.dt", "sample.n")
    params, _, _, header = load_training_checkpoint(r.str("sample.checkpoint"))
    scalar = header.get("train_config", {}).get("objective") == "sgm_scalar"
    spec = SDESpec(r.float("sde.a"), r.float("sde.b", 0.0), r.float("sde.sigma"), r.float("sde.T"), params.d)
    seed = r.int("sample.seed", 0)
    ens = _simulate(spec, _score_model(params, spec, scalar), r, seed)
    write_ensemble_csv(out / "samples.csv", ens)
    arts = ["samples.csv"]
    if "target.kind" in cfg:
        _dump(out / "metrics.json", asdict(_report(ens.states, r, C.build_target(r))))
        arts.append("metrics.json")
    return seed, arts


def cmd_verify(cfg, out: Path):
    r = C.Resolver(cfg)
    base = VerifyConfig()
    vc = VerifyConfig(
        a=r.float("sde.a", base.a), sigma=r.float("sde.sigma", base.sigma), T=r.float("verify.T", base.T),
        mu0=r.float("verify.mu0", base.mu0), v0=r.float("verify.v0", base.v0),
        n_x=r.int("verify.n_x", base.n_x), n_t=r.int("verify.n_t", base.n_t),
        levels=r.int("verify.levels", base.levels), small_sigma=r.float("verify.small_sigma", base.small_sigma),
    )
    report = run_verification(vc)
    write_report(out / "report.json", report, {"verify_config": asdict(vc)})
    return None, ["report.json"], all(c["passed"] for c in report)


def cmd_metrics(cfg, out: Path, inputs):
    r = C.Resolver(cfg)
    paths = list(inputs) or [r.str("metrics.x"), r.str("metrics.y")]
    if len(paths) != 2:
        raise ConfigError("metrics needs exactly two sample CSVs")
    X, Y = (read_ensemble_csv(p) for p in paths)
    target = C.build_target(r) if "target.kind" in cfg else None
    bw = r.float("metrics.bandwidth", 0.0) or None
    rep = asdict(metric_report(X, Y, target, bw))
    rep["inputs"] = [str(p) for p in paths]
    _dump(out / "metrics.json", rep)
    return None, ["metrics.json"]


def cmd_figure(cfg, out: Path, inputs, png=False):
    r = C.Resolver(cfg)
    paths = list(inputs) or [r.str("figure.input")]
    if len(paths) != 1:
        raise ConfigError("figure takes one sample CSV")
    img = rasterize(read_ensemble_csv(paths[0]))
    write_ppm(out / "figure.ppm", img)
    arts = ["figure.ppm"]
    if png or r.bool("figure.png", False):
        write_png(out / "figure.png", img)
        arts.append("figure.png")
    return None, arts


# ---------------------------------------------------------------- entry point

COMMANDS = ("train-sgm", "train-pinn", "train-otflow", "train-otbg", "run-wgf", "sample", "verify", "metrics",
            "figure")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfglab", description="Mean-field-game generative modelling experiments.")
    ap.add_argument("--list-presets", action="store_true", help="print shipped presets and exit")
    sub = ap.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--preset", help="shipped preset name, applied before --config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a key")
        p.add_argument("--out", required=True, help="output directory")
        if name in ("metrics", "figure"):
            p.add_argument("inputs", nargs="*", help="sample CSV file(s)")
        if name == "figure":
            p.add_argument("--png", action="store_true", help="also write figure.png")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list_presets:
        print("\n".join(C.preset_names()))
        return 0
    if not args.command:
        build_parser().print_usage(sys.stderr)
        return 2
    try:
        cfg = C.load_config(args.config, args.preset, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ok = True
        cmd = args.command
        if cmd == "train-sgm":
            seed, arts = cmd_train_sgm(cfg, out)
        elif cmd == "train-pinn":
            seed, arts = cmd_train_sgm(cfg, out, pinn=True)
        elif cmd == "train-otflow":
            seed, arts = cmd_train_cnf(cfg, out, "ot_flow")
        elif cmd == "train-otbg":
            seed, arts = cmd_train_cnf(cfg, out)
        elif cmd == "run-wgf":
            seed, arts = cmd_run_wgf(cfg, out)
        elif cmd == "sample":
            seed, arts = cmd_sample(cfg, out)
        elif cmd == "verify":
            seed, arts, ok = cmd_verify(cfg, out)
        elif cmd == "metrics":
            seed, arts = cmd_metrics(cfg, out, args.inputs)
        else:
            seed, arts = cmd_figure(cfg, out, args.inputs, args.png)
        write_manifest(out, cmd, cfg, seed, arts)
    except MFGLabError as exc:
        print(f"mfglab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mfglab {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


def main():
    sys.exit(run())
