"""Command line for dataset generation, training, estimation and benchmarking.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import struct
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bench import (BenchReport, SweepSpec, emit_csv, emit_per_sample_csv, emit_svg,
                    make_observations, measure_runtime, run_sweep)
from .channels import (ArrayGeometry, ChannelDataset, DatasetFormatError, build_dataset,
                       decode_dataset, get_profile, load_dataset, save_dataset)
from .estimator import EstimatorConfig, estimate_batch, pilot_count
from .tensor import DomainError, Rng, StructureError, nmse_db
from .training import TrainConfig, train
from .velocity import ARCHES, CheckpointError, load_checkpoint, param_count

log = logging.getLogger("fmchan")


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


DEFAULTS = {
    "gen-dataset": {"num": 100, "nt": 64, "nr": 16, "profile": "nlos-c-like", "seed": 0,
                    "spacing": 0.5, "clusters": None, "rays": None, "spread_deg": None,
                    "decay_db": None, "rician_k_db": None, "profile_seed": None,
                    "normalize_with": None},
    "train": {"arch": "lite", "levels": None, "epochs": 400, "steps": 311, "batch": 32,
              "lr": 1e-4, "lr_schedule": "constant", "seed": 0, "ckpt_every": 10},
    "estimate": {"snr_db": 10.0, "alpha": 1.0, "steps": 100, "step_rule": "matched",
                 "gamma_c": 1.0, "m_samples": 1, "seed": 0},
    "bench": {},
    "inspect": {},
}


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Built-in defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for k, v in vars(args).items():
        if k in ("func", "config", "command") or v is None:
            continue
        cfg[k] = v
    return cfg


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise RunError(f"{path} exists; pass --force to overwrite")


def write_manifest(path: Path, command: str, cfg: dict, inputs: list, outputs: list,
                   started: str) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in cfg.items() if k != "force"},
        "version": __version__,
        "seeds": {k: v for k, v in cfg.items() if "seed" in k},
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def cmd_gen_dataset(cfg: dict) -> None:
    started = _now()
    out = Path(cfg["out"])
    manifest = out.with_name(out.name + ".manifest.json")
    _check_writable(out, cfg.get("force"))
    try:
        profile = get_profile(cfg["profile"], num_clusters=cfg["clusters"],
                              rays_per_cluster=cfg["rays"], angular_spread_deg=cfg["spread_deg"],
                              cluster_power_decay_db=cfg["decay_db"],
                              rician_k_db=cfg["rician_k_db"], seed=cfg["profile_seed"])
        geometry = ArrayGeometry(cfg["nt"], cfg["nr"], cfg["spacing"])
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    inputs = []
    power = None
    if cfg["normalize_with"]:
        power = load_dataset(cfg["normalize_with"]).normalization_power
        inputs.append(cfg["normalize_with"])
    ds = build_dataset(geometry, profile, cfg["num"], Rng(cfg["seed"]), power=power)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    write_manifest(manifest, "gen-dataset", cfg, inputs, [out], started)
    print(f"wrote {len(ds)} channels ({geometry.n_r}x{geometry.n_t}, {cfg['profile']}) to {out}")


def cmd_train(cfg: dict) -> None:
    started = _now()
    out = Path(cfg["out"])
    final = out / "final.fmck"
    _check_writable(final, cfg.get("force"))
    ds = load_dataset(cfg["dataset"])
    if cfg["arch"] not in ARCHES:
        raise UsageError(f"--arch must be one of {sorted(ARCHES)}")
    g = ds.geometry
    try:
        arch = ARCHES[cfg["arch"]](g.n_r, g.n_t, cfg["levels"])
        config = TrainConfig(epochs=cfg["epochs"], steps_per_epoch=cfg["steps"],
                             batch_size=cfg["batch"], lr=cfg["lr"], seed=cfg["seed"],
                             ckpt_every=cfg["ckpt_every"], arch=cfg["arch"], levels=cfg["levels"],
                             lr_schedule=cfg["lr_schedule"])
    except (StructureError, DomainError, ValueError) as exc:
        raise UsageError(f"architecture/config incompatible with {g.n_r}x{g.n_t} data: {exc}") from None
    print(f"arch {cfg['arch']} widths={list(arch.widths)} params={param_count(arch)}")
    out.mkdir(parents=True, exist_ok=True)
    net, tlog = train(ds, config, out_dir=out)
    tlog.write_csv(out / "train_log.csv")
    write_manifest(out / "manifest.json", "train", cfg, [cfg["dataset"]],
                   [final, out / "train_log.csv"], started)
    print(f"final epoch loss {tlog.epoch_loss[-1]:.5f}; checkpoint {final}")


def cmd_estimate(cfg: dict) -> None:
    started = _now()
    out = Path(cfg["out"])
    est_path, csv_path = out / "estimates.fmch", out / "per_sample.csv"
    _check_writable(est_path, cfg.get("force"))
    net = load_checkpoint(cfg["model"])
    ds = load_dataset(cfg["dataset"])
    want = tuple(net.arch.input_shape)
    have = (2, ds.geometry.n_r, ds.geometry.n_t)
    if want != have:
        raise RunError(f"checkpoint expects input {want} but dataset has shape {have}")
    try:
        config = EstimatorConfig(K=cfg["steps"], step_rule=cfg["step_rule"],
                                 gamma_c=cfg["gamma_c"], m_samples=cfg["m_samples"],
                                 seed=cfg["seed"])
        pilot_count(cfg["alpha"], ds.geometry.n_t)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    root = Rng(cfg["seed"])
    obs = make_observations(ds.samples, cfg["snr_db"], cfg["alpha"], root, "estimate")
    n_p = obs[0].P.shape[1]
    rngs = [root.fork("estimator", "estimate", n_p, 0, i) for i in range(len(obs))]
    acc = estimate_batch(net, obs, config, rngs, 0)
    for m in range(1, config.m_samples):
        acc = acc + estimate_batch(net, obs, config, rngs, m)
    est = acc / config.m_samples
    out.mkdir(parents=True, exist_ok=True)
    meta = {"snr_db": cfg["snr_db"], "alpha": cfg["alpha"], "n_p": n_p,
            "source": str(cfg["dataset"]), "kind": "estimates"}
    save_dataset(ChannelDataset(ds.geometry, ds.profile, est, ds.normalization_power, meta),
                 est_path)
    scores = [nmse_db(e, h) for e, h in zip(est, ds.samples)]
    with open(csv_path, "w") as fh:
        fh.write("sample,nmse_db\n")
        for i, v in enumerate(scores):
            fh.write(f"{i},{v!r}\n")
    write_manifest(out / "manifest.json", "estimate", cfg, [cfg["model"], cfg["dataset"]],
                   [est_path, csv_path], started)
    finite = [v for v in scores if np.isfinite(v)]
    print(f"{len(scores)} estimates, mean NMSE {np.mean(finite):.3f} dB "
          f"(N_p={n_p}, SNR={cfg['snr_db']} dB, M={config.m_samples})")


def _sweep_spec(cfg: dict) -> SweepSpec:
    keys = ("methods", "snr_db", "alpha", "datasets", "models", "train_dataset", "seed",
            "repetitions", "K", "step_rule", "gamma_c", "decay", "shared_pilots",
            "max_samples", "verbose")
    try:
        return SweepSpec(**{k: cfg[k] for k in keys if k in cfg})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad sweep spec: {exc}") from None


def cmd_bench(cfg: dict) -> None:
    started = _now()
    if not cfg.get("spec"):
        raise UsageError("--spec is required")
    try:
        loaded = json.loads(Path(cfg["spec"]).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read spec {cfg['spec']}: {exc}") from None
    cfg = {**loaded, **{k: v for k, v in cfg.items() if v is not None}}
    spec = _sweep_spec(cfg)
    out = Path(cfg["out_dir"])
    _check_writable(out / "report.csv", cfg.get("force"))
    out.mkdir(parents=True, exist_ok=True)
    report = run_sweep(spec)
    if all(r.error for r in report.rows):
        raise RunError("every method failed: " + "; ".join(sorted({r.error for r in report.rows})))
    outputs = [out / "report.csv"]
    emit_csv(report, outputs[0])
    if spec.verbose:
        outputs.append(out / "report.per_sample.csv")
        emit_per_sample_csv(report, outputs[-1])
    for axis, other, grid in (("snr_db", "alpha", spec.snr_db), ("alpha", "snr_db", spec.alpha)):
        if len(grid) < 2:
            continue
        # hold the other axis at its first grid value
        fixed = getattr(spec, other)[0]
        sub = BenchReport([r for r in report.rows if getattr(r, other) == float(fixed)])
        for profile in spec.datasets:
            p = out / f"nmse_vs_{axis.split('_')[0]}_{profile}.svg"
            emit_svg(sub, p, axis, profile, f"NMSE vs {axis} ({profile}, {other}={fixed:g})")
            outputs.append(p)
    workload = int(cfg.get("runtime_workload", 10))
    if workload:
        outputs.append(out / "runtime.csv")
        _runtime_table(spec, workload, outputs[-1])
    inputs = [p for p in list(spec.datasets.values()) + list(spec.models.values())
              + [spec.train_dataset] if isinstance(p, (str, Path)) and p]
    write_manifest(out / "manifest.json", "bench", cfg, inputs, outputs, started)
    print(f"{len(report.rows)} rows -> {out}")


def _runtime_table(spec: SweepSpec, workload: int, path: Path) -> None:
    from .estimator import channel_covariance, estimate_lmmse, estimate_ls

    profile, dpath = next(iter(spec.datasets.items()))
    ds = load_dataset(dpath) if not isinstance(dpath, ChannelDataset) else dpath
    obs = make_observations(ds.samples[:1], spec.snr_db[0], spec.alpha[0], Rng(spec.seed), profile)
    rng = Rng(spec.seed).fork("runtime")
    rows = []
    for method in spec.methods:
        if method in ("proposed", "proposed-lite", "mmse4"):
            m = spec.models.get(method, spec.models.get("proposed"))
            net = load_checkpoint(m) if isinstance(m, (str, Path)) else m
            cfg = spec.estimator_config(4 if method == "mmse4" else 1)

            def fn(net=net, cfg=cfg):
                for s in range(cfg.m_samples):
                    estimate_batch(net, obs, cfg, [rng], s)
        elif method == "ls":
            def fn():
                estimate_ls(obs[0])
        else:
            tr = spec.train_dataset
            cov = channel_covariance((load_dataset(tr) if isinstance(tr, (str, Path)) else tr).samples)

            def fn(cov=cov):
                estimate_lmmse(obs[0], covariance=cov)
        stats = measure_runtime(fn, n=workload)
        rows.append((method, stats))
    with open(path, "w") as fh:
        fh.write("method,mean_ms,p50_ms,p95_ms,peak_mem_bytes,n\n")
        for method, s in rows:
            fh.write(f"{method},{s['mean_ms']:.4f},{s['p50_ms']:.4f},{s['p95_ms']:.4f},"
                     f"{s['peak_mem_bytes']},{s['n']}\n")


def cmd_inspect(cfg: dict) -> None:
    path = Path(cfg["path"])
    buf = path.read_bytes()
    if buf[:4] == b"FMCH":
        ds = decode_dataset(buf)
        info = {"format": "FMCH", "num_samples": len(ds), "n_r": ds.geometry.n_r,
                "n_t": ds.geometry.n_t, "spacing_wavelengths": ds.geometry.spacing_wavelengths,
                "normalization_power": ds.normalization_power, "profile": asdict(ds.profile),
                "meta": ds.meta}
    elif buf[:4] == b"FMCK":
        net = load_checkpoint(path)
        info = {"format": "FMCK", "arch": net.arch.to_json(), "param_count": net.param_count,
                "crc32": f"{struct.unpack('<I', buf[-4:])[0]:08x}"}
    else:
        raise RunError(f"{path}: unknown file type {buf[:4]!r}")
    print(json.dumps(info, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmchan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread cap (default $FMCHAN_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    g = sub.add_parser("gen-dataset", help="generate a synthetic channel dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=S)
    g.add_argument("--nt", type=int, default=S)
    g.add_argument("--nr", type=int, default=S)
    g.add_argument("--profile", default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--spacing", type=float, default=S)
    g.add_argument("--clusters", type=int, default=S)
    g.add_argument("--rays", type=int, default=S)
    g.add_argument("--spread-deg", type=float, default=S)
    g.add_argument("--decay-db", type=float, default=S)
    g.add_argument("--rician-k-db", type=float, default=S)
    g.add_argument("--profile-seed", type=int, default=S)
    g.add_argument("--normalize-with", default=S,
                   help="dataset whose normalization power to reuse (for test sets)")
    g.set_defaults(func=cmd_gen_dataset)

    t = sub.add_parser("train", help="train a velocity network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--arch", default=S)
    t.add_argument("--levels", type=int, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--steps", type=int, default=S)
    t.add_argument("--batch", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--lr-schedule", choices=["constant", "cosine"], default=S)
    t.add_argument("--seed", type=int, default=S)
    t.add_argument("--ckpt-every", type=int, default=S)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", help="estimate every channel of a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--snr-db", type=float, default=S)
    e.add_argument("--alpha", type=float, default=S)
    e.add_argument("--steps", type=int, default=S)
    e.add_argument("--step-rule", choices=["matched", "spectral", "normalized"], default=S)
    e.add_argument("--gamma-c", type=float, default=S)
    e.add_argument("--m-samples", type=int, default=S)
    e.add_argument("--seed", type=int, default=S)
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", help="run an NMSE / runtime sweep")
    b.add_argument("--spec", required=True, help="JSON sweep description")
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="print a dataset or checkpoint header")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)

    for sp in (g, t, e, b):
        sp.add_argument("--config", default=None, help="JSON file with flag defaults")
        sp.add_argument("--force", action="store_true", default=S, help="overwrite outputs")
        sp.add_argument("--threads", type=int, default=S, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None) or int(os.environ.get("FMCHAN_THREADS", "0") or 0) or None
    try:
        cfg = resolve(args.command, argparse.Namespace(**{
            k: v for k, v in vars(args).items() if k not in ("verbose", "threads")}))
        with threadpool_limits(limits=threads):
            args.func(cfg)
    except UsageError as exc:
        print(f"fmchan: usage error: {exc}", file=sys.stderr)
        return 2
    except (RunError, OSError, DatasetFormatError, CheckpointError, StructureError,
            DomainError, RuntimeError) as exc:
        print(f"fmchan: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
