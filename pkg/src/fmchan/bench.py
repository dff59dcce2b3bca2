"""Sweeps over SNR / pilot density, runtime measurement, CSV and SVG output."""

from __future__ import annotations

import csv
import logging
import math
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable
from xml.sax.saxutils import escape

import numpy as np
from threadpoolctl import threadpool_limits

from .channels import ChannelDataset, load_dataset
from .estimator import (EstimatorConfig, channel_covariance, estimate_batch, estimate_lmmse,
                        estimate_ls, pilot_count, simulate_observation)
from .tensor import Rng, draw_qpsk_pilots, nmse_db
from .velocity import VelocityNet, load_checkpoint

log = logging.getLogger(__name__)

METHODS = ("proposed", "proposed-lite", "mmse4", "ls", "lmmse")
# Slots for results produced by other code bases, merged via merge_external().
EXTERNAL_METHODS = ("score-langevin", "score-vi", "diffusion")

COLUMNS = ["method", "profile", "snr_db", "alpha", "mean_nmse_db", "std_nmse_db",
           "mean_runtime_ms", "peak_mem_bytes", "n_samples"]


@dataclass
class SweepSpec:
    methods: list
    snr_db: list
    alpha: list = field(default_factory=lambda: [1.0])
    datasets: dict = field(default_factory=dict)  # profile label -> path or ChannelDataset
    models: dict = field(default_factory=dict)    # method -> path or VelocityNet
    train_dataset: object = None                  # needed by lmmse
    seed: int = 0
    repetitions: int = 1
    K: int = 100
    step_rule: str = "matched"
    gamma_c: float = 1.0
    decay: float = 0.0
    shared_pilots: bool = False
    max_samples: int | None = None
    verbose: bool = False

    def __post_init__(self):
        if not self.methods:
            raise ValueError("method list is empty")
        if not self.snr_db or not self.alpha:
            raise ValueError("SNR and alpha grids must be non-empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        for m in self.methods:
            if m in ("proposed", "mmse4") and "proposed" not in self.models and m not in self.models:
                raise ValueError(f"method {m!r} needs a 'proposed' model")
            if m == "proposed-lite" and m not in self.models:
                raise ValueError("method 'proposed-lite' needs a model")
        if "lmmse" in self.methods and self.train_dataset is None:
            raise ValueError("lmmse needs train_dataset")
        if not self.datasets:
            raise ValueError("no test datasets given")

    def estimator_config(self, m_samples: int = 1) -> EstimatorConfig:
        return EstimatorConfig(K=self.K, step_rule=self.step_rule, gamma_c=self.gamma_c,
                               decay=self.decay, m_samples=m_samples, seed=self.seed)


@dataclass
class BenchRow:
    method: str
    profile: str
    snr_db: float
    alpha: float
    mean_nmse_db: float
    std_nmse_db: float
    mean_runtime_ms: float
    peak_mem_bytes: int
    n_samples: int
    exact_recoveries: int = 0
    error: str = ""
    per_sample: list = field(default_factory=list, repr=False)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def row(self, method, profile, snr_db, alpha) -> BenchRow:
        for r in self.rows:
            if (r.method, r.profile, r.snr_db, r.alpha) == (method, profile, snr_db, alpha):
                return r
        raise KeyError((method, profile, snr_db, alpha))

    def curve(self, method, profile, axis="snr_db") -> tuple[list, list]:
        pts = sorted((getattr(r, axis), r.mean_nmse_db) for r in self.rows
                     if r.method == method and r.profile == profile)
        return [p[0] for p in pts], [p[1] for p in pts]


def aggregate(values_db) -> tuple[float, float, int, int]:
    """(mean, std, n_finite, n_exact) of per-sample NMSE dB values; -inf counted apart."""
    v = np.asarray(values_db, dtype=np.float64)
    exact = int(np.sum(np.isneginf(v)))
    fin = v[np.isfinite(v)]
    if fin.size == 0:
        return float("nan"), float("nan"), 0, exact
    return float(fin.mean()), float(fin.std()), int(fin.size), exact


def _as_dataset(d) -> ChannelDataset:
    return d if isinstance(d, ChannelDataset) else load_dataset(d)


def _as_net(m) -> VelocityNet:
    return m if isinstance(m, VelocityNet) else load_checkpoint(m)


def make_observations(samples: np.ndarray, snr_db: float, alpha: float, rng: Rng,
                      profile: str, rep: int = 0, shared_pilots: bool = False):
    """Seeded pilots and noise for every sample.

    Streams are keyed by (profile, N_p, rep, sample) and not by SNR, so the
    same underlying noise is rescaled across the SNR grid.
    """
    n_t = samples.shape[2]
    n_p = pilot_count(alpha, n_t)
    out = []
    for i, h in enumerate(samples):
        key = (profile, n_p, rep, 0 if shared_pilots else i)
        p = draw_qpsk_pilots(rng.fork("pilots", *key), n_t, n_p)
        out.append(simulate_observation(h, p, snr_db, rng.fork("noise", profile, n_p, rep, i)))
    return out


def _timed(fn: Callable):
    tracemalloc.start()
    t0 = time.perf_counter()
    try:
        result = fn()
    finally:
        elapsed = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return result, elapsed, peak


def run_sweep(spec: SweepSpec) -> BenchReport:
    root = Rng(spec.seed)
    datasets = {k: _as_dataset(v) for k, v in spec.datasets.items()}
    nets = {k: _as_net(v) for k, v in spec.models.items()}
    cov = None
    if "lmmse" in spec.methods:
        cov = channel_covariance(_as_dataset(spec.train_dataset).samples)
    report = BenchReport()

    for profile, ds in datasets.items():
        samples = ds.samples[:spec.max_samples] if spec.max_samples else ds.samples
        for snr in spec.snr_db:
            for alpha in spec.alpha:
                per_rep = [make_observations(samples, snr, alpha, root, profile, rep,
                                             spec.shared_pilots)
                           for rep in range(spec.repetitions)]
                for method in spec.methods:
                    row = _run_method(method, spec, nets, cov, samples, per_rep, root, profile)
                    row.snr_db, row.alpha = float(snr), float(alpha)
                    report.rows.append(row)
                    log.info("%s %s snr=%g alpha=%g nmse=%.3f dB", method, profile, snr, alpha,
                             row.mean_nmse_db)
    return report


def _run_method(method, spec, nets, cov, samples, per_rep, root, profile) -> BenchRow:
    nmse: list[float] = []
    seconds = 0.0
    peak = 0
    count = 0
    try:
        for rep, obs in enumerate(per_rep):
            n_p = obs[0].P.shape[1]
            if method in ("proposed", "proposed-lite", "mmse4"):
                net = nets.get(method, nets.get("proposed"))
                m = 4 if method == "mmse4" else 1
                cfg = spec.estimator_config(m)
                rngs = [root.fork("estimator", profile, n_p, rep, i) for i in range(len(obs))]

                def run():
                    acc = estimate_batch(net, obs, cfg, rngs, 0)
                    for s in range(1, m):
                        acc = acc + estimate_batch(net, obs, cfg, rngs, s)
                    return acc / m
            elif method == "ls":
                def run():
                    return [estimate_ls(o) for o in obs]
            else:
                def run():
                    return [estimate_lmmse(o, covariance=cov) for o in obs]
            est, dt, pk = _timed(run)
            seconds += dt
            peak = max(peak, pk)
            count += len(obs)
            nmse.extend(nmse_db(e, h) for e, h in zip(est, samples))
    except Exception as exc:  # recorded per row; the sweep goes on
        log.warning("%s failed: %s", method, exc)
        return BenchRow(method, profile, 0.0, 0.0, float("nan"), float("nan"), float("nan"), 0, 0,
                        error=f"{type(exc).__name__}: {exc}")
    mean, std, n, exact = aggregate(nmse)
    return BenchRow(method, profile, 0.0, 0.0, mean, std, 1e3 * seconds / max(count, 1), peak,
                    n, exact, per_sample=nmse if spec.verbose else [])


def measure_runtime(fn: Callable[[], object], n: int = 100, warmup: int = 3) -> dict:
    """Wall-clock statistics of ``n`` sequential calls, single-threaded BLAS.

    Peak memory is the tracemalloc high-water mark of one extra call, so the
    timed calls run without tracing overhead.
    """
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(n):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        _, _, peak = _timed(fn)
    ms = np.asarray(times) * 1e3
    return {"mean_ms": float(ms.mean()), "p50_ms": float(np.percentile(ms, 50)),
            "p95_ms": float(np.percentile(ms, 95)), "peak_mem_bytes": int(peak), "n": n}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def emit_csv(report: BenchReport, path) -> None:
    if not report.rows:
        raise ValueError("empty report")
    cols = list(COLUMNS)
    if any(r.exact_recoveries for r in report.rows):
        cols.append("exact_recoveries")
    if any(r.error for r in report.rows):
        cols.append("error")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in report.rows:
            w.writerow([_fmt(getattr(r, c)) for c in cols])


def emit_per_sample_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "profile", "snr_db", "alpha", "sample", "nmse_db"])
        for r in report.rows:
            for i, v in enumerate(r.per_sample):
                w.writerow([r.method, r.profile, _fmt(r.snr_db), _fmt(r.alpha), i, _fmt(v)])


def load_csv(path) -> BenchReport:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(BenchRow(
                rec["method"], rec["profile"], float(rec["snr_db"]), float(rec["alpha"]),
                float(rec["mean_nmse_db"]), float(rec["std_nmse_db"]),
                float(rec["mean_runtime_ms"]), int(rec["peak_mem_bytes"]), int(rec["n_samples"]),
                int(rec.get("exact_recoveries") or 0), rec.get("error") or ""))
    return BenchReport(rows)


def merge_external(report: BenchReport, path) -> BenchReport:
    """Append rows for externally computed baselines (same CSV schema)."""
    other = load_csv(path)
    for r in other.rows:
        if r.method not in EXTERNAL_METHODS + METHODS:
            raise ValueError(f"unknown method {r.method!r} in {path}")
    return BenchReport(report.rows + other.rows)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]


def emit_svg(report: BenchReport, path, axis: str = "snr_db", profile: str | None = None,
             title: str = "") -> None:
    """Static SVG line chart of mean NMSE against ``axis``, one polyline per method."""
    rows = [r for r in report.rows if (profile is None or r.profile == profile)
            and math.isfinite(r.mean_nmse_db)]
    if not rows:
        raise ValueError("nothing to plot")
    methods = list(dict.fromkeys(r.method for r in rows))
    xs = [getattr(r, axis) for r in rows]
    ys = [r.mean_nmse_db for r in rows]
    x0, x1 = min(xs), max(xs)
    y0, y1 = math.floor(min(ys) / 5) * 5, math.ceil(max(ys) / 5) * 5
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 5, y1 + 5
    W, H, L, R, T, B = 640, 420, 70, 150, 40, 50

    def px(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return T + (y1 - y) / (y1 - y0) * (H - T - B)

    xlabel = "SNR [dB]" if axis == "snr_db" else "pilot density alpha"
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<rect x="{L}" y="{T}" width="{W - L - R}" height="{H - T - B}" fill="none" stroke="black"/>']
    for y in range(int(y0), int(y1) + 1, 5):
        out.append(f'<line x1="{L}" y1="{py(y):.2f}" x2="{W - R}" y2="{py(y):.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{L - 6}" y="{py(y) + 4:.2f}" text-anchor="end" font-size="11">{y}</text>')
    for x in sorted(set(xs)):
        out.append(f'<text x="{px(x):.2f}" y="{H - B + 16}" text-anchor="middle" '
                   f'font-size="11">{x:g}</text>')
    out.append(f'<text x="{(L + W - R) / 2}" y="{H - 12}" text-anchor="middle" '
               f'font-size="12">{xlabel}</text>')
    out.append(f'<text x="18" y="{(T + H - B) / 2}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 18 {(T + H - B) / 2})">NMSE [dB]</text>')
    for k, m in enumerate(methods):
        col = _PALETTE[k % len(_PALETTE)]
        groups = {}
        for r in rows:
            if r.method == m:
                groups.setdefault(r.profile, []).append((getattr(r, axis), r.mean_nmse_db))
        for prof, pts in groups.items():
            pts.sort()
            coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            dash = ' stroke-dasharray="6,3"' if len(groups) > 1 and prof != next(iter(groups)) else ""
            label = m if len(groups) == 1 else f"{m} ({prof})"
            out.append(f'<polyline data-series="{escape(label)}" points="{coords}" fill="none" '
                       f'stroke="{col}" stroke-width="2"{dash}/>')
        ly = T + 16 + 18 * k
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 30}" y2="{ly}" '
                   f'stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 35}" y="{ly + 4}" font-size="11">{escape(m)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
