"""Acceptance gate: one test per numbered criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The desk-scale model is trained once per module (a few minutes on one core).
"""

import contextlib
import hashlib
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import VERDICTS
from fmchan import autodiff as ad
from fmchan.bench import BenchReport, SweepSpec, emit_csv, make_observations, measure_runtime, run_sweep
from fmchan.channels import (ArrayGeometry, ChannelDataset, ClusterProfile, build_dataset,
                             get_profile, save_dataset)
from fmchan.estimator import (EstimatorConfig, PilotObservation, denoise, estimate,
                              fidelity_step)
from fmchan.gradcheck import OP_CASES, check_op, numeric_grad, rel_error
from fmchan.tensor import Rng, draw_complex_gaussian_matrix, stack, unstack
from fmchan.training import TrainConfig, cfm_loss, train
from fmchan.velocity import VelocityNet, full_arch, lite_arch, save_checkpoint

SNRS = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0]
DESK = dict(n_t=16, n_r=4, n_train=4000, n_test=100, epochs=30, steps=311, batch=32)
DESK_LR, DESK_SCHEDULE = 3e-3, "cosine"
POINT = dict(steps=2000, batch=128, lr=1e-2, schedule="cosine")


class Verdict:
    def __init__(self):
        self.detail = ""


@contextlib.contextmanager
def criterion(request, number, title):
    v = Verdict()
    store = request.config.stash[VERDICTS]
    try:
        yield v
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        store[number] = (False, title, f"{v.detail} [{msg}]".strip())
        raise
    store[number] = (True, title, v.detail)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- 1


def test_c01_stacking_bijection_and_isometry(request):
    with criterion(request, 1, "stacking bijection / isometry") as v:
        rng = Rng(1001)
        t0 = time.perf_counter()
        worst_ulp = 0.0
        for i in range(1000):
            r, c = 1 + int(rng.integers(16, 1)[0]), 1 + int(rng.integers(64, 1)[0])
            scale = 10.0 ** float(rng.uniform(1)[0] * 8 - 4)
            h = draw_complex_gaussian_matrix(rng, r, c) * scale
            x = stack(h)
            back = unstack(x)
            assert back.view(np.uint64).tobytes() == h.view(np.uint64).tobytes()
            a = np.linalg.norm(h)
            b = np.linalg.norm(x.ravel())
            worst_ulp = max(worst_ulp, abs(a - b) / np.spacing(a))
        elapsed = time.perf_counter() - t0
        v.detail = f"worst norm gap {worst_ulp:.1f} ulp, {elapsed:.2f} s"
        assert worst_ulp <= 4
        assert elapsed < 1.0


# ---------------------------------------------------------------- 2


def _random_lite_net(seed):
    arch = lite_arch(8, 8)
    r = Rng(seed, ("gate-net",))
    params = r.normal(VelocityNet(arch).param_count) * 0.15
    return VelocityNet(arch, params)


def test_c02_autodiff_gate(request):
    with criterion(request, 2, "autodiff finite-difference gate") as v:
        t0 = time.perf_counter()
        worst_op = 0.0
        for seed in range(20):
            for name, (op, make) in OP_CASES.items():
                worst_op = max(worst_op, check_op(op, make(Rng(seed, (name,))), Rng(seed, ("proj",))))
        worst_net = 0.0
        for seed in range(20):
            net = _random_lite_net(seed)
            r = Rng(seed, ("gate-batch",))
            x0, x1, t = r.normal((2, 2, 8, 8)), r.normal((2, 2, 8, 8)), r.uniform(2)
            tape = ad.Tape()
            loss, leaves = cfm_loss(net, x0, x1, t, tape)
            grad = net.flat_grad(tape, tape.backward(loss), leaves)
            # one entry from every parameter segment plus random extras
            idx = [off + int(r.integers(int(np.prod(shape)), 1)[0])
                   for off, shape in net.segments.values()]
            idx += [int(k) for k in r.integers(net.param_count, 20)]
            num = numeric_grad(lambda: cfm_loss(net, x0, x1, t), net.params, 1e-4, idx)
            worst_net = max(worst_net, rel_error(grad[idx], num))
            # directional derivative along a random unit direction over all parameters
            d = r.normal(net.param_count)
            d /= np.linalg.norm(d)
            base = net.params.copy()
            net.params = base + 1e-3 * d
            fp = cfm_loss(net, x0, x1, t)
            net.params = base - 1e-3 * d
            fm = cfm_loss(net, x0, x1, t)
            net.params = base
            worst_net = max(worst_net, rel_error(grad @ d, (fp - fm) / 2e-3))
        elapsed = time.perf_counter() - t0
        v.detail = (f"ops {len(OP_CASES)} x 20 seeds max rel {worst_op:.2e}; "
                    f"lite-net loss max rel {worst_net:.2e}; {elapsed:.1f} s")
        assert worst_op < 1e-5 and worst_net < 1e-5
        assert elapsed < 60


# ---------------------------------------------------------------- 3


class _OracleField:
    """Exact straight-path velocity toward known endpoints."""

    def __init__(self, x1):
        self.x1 = x1

    def forward(self, x, t):
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
        return (self.x1 - x) / (1.0 - t)


def test_c03_denoiser_identity(request):
    with criterion(request, 3, "denoiser identity with oracle field") as v:
        r = Rng(303)
        t0 = time.perf_counter()
        x0, x1 = r.normal((1000, 2, 4, 16)), r.normal((1000, 2, 4, 16))
        t = 0.99 * r.uniform(1000)
        x = (1 - t[:, None, None, None]) * x0 + t[:, None, None, None] * x1
        out = denoise(_OracleField(x1), x, t)
        err = float(np.max(np.abs(out - x1)))
        elapsed = time.perf_counter() - t0
        v.detail = f"max |D_t(x) - x1| = {err:.2e}, {elapsed:.3f} s"
        assert err <= 1e-9 and elapsed < 1.0


# ---------------------------------------------------------------- 4


def _point_target_run(tmp_path):
    target = draw_complex_gaussian_matrix(Rng(404, ("target",)), 4, 4)
    ds = ChannelDataset(ArrayGeometry(4, 4), ClusterProfile(), target[None], 1.0, {})
    cfg = TrainConfig(epochs=1, steps_per_epoch=POINT["steps"], batch_size=POINT["batch"],
                      lr=POINT["lr"], lr_schedule=POINT["schedule"], levels=2, seed=404)
    net, _ = train(ds, cfg)
    path = tmp_path / "point.fmck"
    save_checkpoint(net, path)
    x = Rng(404, ("euler",)).normal((50, 2, 4, 4))
    for k in range(100):
        x = x + net.forward(x, np.full(50, k / 100)) / 100
    xs = stack(target)
    rel = np.linalg.norm((x - xs).reshape(50, -1), axis=1) / np.linalg.norm(xs)
    return net, rel, path


@pytest.fixture(scope="module")
def point_run(tmp_path_factory):
    t0 = time.perf_counter()
    out = _point_target_run(tmp_path_factory.mktemp("point"))
    return out + (time.perf_counter() - t0,)


def test_c04_constant_target_flow(request, point_run):
    with criterion(request, 4, "constant-target flow") as v:
        net, rel, _, elapsed = point_run
        v.detail = (f"widths {list(net.arch.widths)}; mean rel L2 {rel.mean():.4f} "
                    f"(max {rel.max():.4f}); {elapsed:.0f} s")
        assert net.arch.widths == (8, 16)
        assert rel.mean() <= 0.05
        assert elapsed < 300


# ---------------------------------------------------------------- 5


def test_c05_one_shot_fidelity(request):
    with criterion(request, 5, "orthogonal-pilot one-shot recovery") as v:
        t0 = time.perf_counter()
        worst = 0.0
        for n_r, n_t in ((4, 16), (16, 64), (3, 5)):
            n = np.arange(n_t)
            p = np.exp(-2j * np.pi * np.outer(n, n) / n_t)  # P P^H = N_t I
            for s in range(10):
                r = Rng(505, (n_r, n_t, s))
                h = draw_complex_gaussian_matrix(r, n_r, n_t) * (1 + 10 * s)
                h0 = draw_complex_gaussian_matrix(r, n_r, n_t)
                sigma2 = float(0.01 + r.uniform(1)[0])
                obs = PilotObservation(h @ p, p, sigma2)
                gamma = EstimatorConfig(step_rule="normalized").step_size(obs, 0.0)
                assert gamma == sigma2 / n_t
                z = fidelity_step(h0, obs, gamma)
                worst = max(worst, np.linalg.norm(z - h) / np.linalg.norm(h))
        elapsed = time.perf_counter() - t0
        v.detail = f"max relative error {worst:.2e}, {elapsed:.3f} s"
        assert worst <= 1e-9 and elapsed < 1.0


# ---------------------------------------------------------------- desk-scale model


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    d = DESK
    g = ArrayGeometry(d["n_t"], d["n_r"])
    t0 = time.perf_counter()
    tr = build_dataset(g, get_profile("nlos-c-like"), d["n_train"], Rng(6001))
    nlos = build_dataset(g, get_profile("nlos-c-like"), d["n_test"], Rng(6002),
                         power=tr.normalization_power)
    los = build_dataset(g, get_profile("los-d-like"), d["n_test"], Rng(6003),
                        power=tr.normalization_power)
    cfg = TrainConfig(epochs=d["epochs"], steps_per_epoch=d["steps"], batch_size=d["batch"],
                      lr=DESK_LR, lr_schedule=DESK_SCHEDULE, levels=2, seed=6000)
    net, log = train(tr, cfg)
    t_train = time.perf_counter() - t0
    spec = SweepSpec(["proposed", "mmse4", "ls", "lmmse"], SNRS,
                     datasets={"nlos": nlos, "los": los}, models={"proposed": net},
                     train_dataset=tr, K=100, seed=6004, verbose=True)
    report = run_sweep(spec)
    t_total = time.perf_counter() - t0
    out = tmp_path_factory.mktemp("desk")
    return dict(train=tr, nlos=nlos, los=los, net=net, log=log, spec=spec, report=report,
                t_train=t_train, t_total=t_total, dir=out)


def _curve(report, method, profile):
    return [report.row(method, profile, s, 1.0).mean_nmse_db for s in SNRS]


def _fmt(vals):
    return "[" + ", ".join(f"{x:.2f}" for x in vals) + "]"


def test_c06_desk_scale_quality(request, desk):
    with criterion(request, 6, "desk-scale NLOS quality") as v:
        rep = desk["report"]
        fm, ls = _curve(rep, "proposed", "nlos"), _curve(rep, "ls", "nlos")
        lm = _curve(rep, "lmmse", "nlos")
        v.detail = (f"proposed {_fmt(fm)} LS {_fmt(ls)} LMMSE {_fmt(lm)} dB over SNR "
                    f"{SNRS[0]:g}..{SNRS[-1]:g}; train {desk['t_train']:.0f} s, "
                    f"total {desk['t_total']:.0f} s")
        i0 = SNRS.index(0.0)
        assert fm[i0] <= ls[i0] - 3.0, "(a) margin at 0 dB"
        assert all(a <= b for a, b in zip(fm, ls)), "(b) proposed <= LS everywhere"
        assert all(b <= a + 0.5 for a, b in zip(fm, fm[1:])), "(c) monotone in SNR"
        assert desk["t_total"] < 30 * 60


def test_c07_out_of_distribution(request, desk):
    with criterion(request, 7, "LOS robustness") as v:
        rep = desk["report"]
        fm, ls = _curve(rep, "proposed", "los"), _curve(rep, "ls", "los")
        v.detail = f"proposed {_fmt(fm)} LS {_fmt(ls)} dB"
        for s in SNRS:
            row = rep.row("proposed", "los", s, 1.0)
            assert not row.error
            assert len(row.per_sample) == len(desk["los"])
            assert all(math.isfinite(x) for x in row.per_sample)
        assert all(a <= b for a, b, s in zip(fm, ls, SNRS) if s >= 10)


def test_c08_pilot_density_trend(request, desk):
    with criterion(request, 8, "pilot-density trend at 25 dB") as v:
        alphas = [0.5, 0.75, 1.0]
        spec = SweepSpec(["proposed", "ls"], [25.0], alphas, datasets={"nlos": desk["nlos"]},
                         models={"proposed": desk["net"]}, K=100, seed=6008)
        rep = run_sweep(spec)
        fm = [rep.row("proposed", "nlos", 25.0, a).mean_nmse_db for a in alphas]
        ls = [rep.row("ls", "nlos", 25.0, a).mean_nmse_db for a in alphas]
        v.detail = f"alpha {alphas}: proposed {_fmt(fm)} LS {_fmt(ls)} dB"
        assert all(b <= a + 0.5 for a, b in zip(fm, fm[1:]))


def test_c09_mmse_averaging(request, desk):
    with criterion(request, 9, "approximate-MMSE gain") as v:
        rep = desk["report"]
        gaps = []
        for prof in ("nlos", "los"):
            one, four = _curve(rep, "proposed", prof), _curve(rep, "mmse4", prof)
            gaps += [b - a for a, b in zip(one, four)]
        v.detail = (f"M=4 minus M=1 per SNR (NLOS then LOS): {_fmt(gaps)} dB; "
                    f"worst {max(gaps):+.2f} dB")
        assert max(gaps) <= 0.1


# ---------------------------------------------------------------- 10


def test_c10_runtime_laws(request, desk):
    with criterion(request, 10, "runtime laws") as v:
        t0 = time.perf_counter()
        net = desk["net"]
        obs = make_observations(desk["nlos"].samples[:1], 10.0, 1.0, Rng(10), "rt")[0]
        # alternate the two workloads and keep the best median of each, so a
        # burst of background load hits both sides instead of one
        t = {100: math.inf, 200: math.inf}
        for _ in range(3):
            for K in t:
                stats = measure_runtime(lambda K=K: estimate(net, obs, EstimatorConfig(K=K), Rng(1)),
                                        n=7, warmup=1)
                t[K] = min(t[K], stats["p50_ms"])
        k_ratio = t[200] / t[100]

        g = ArrayGeometry(64, 16)
        h = build_dataset(g, get_profile("nlos-c-like"), 1, Rng(11)).samples
        big = make_observations(h, 10.0, 1.0, Rng(12), "rt")[0]
        cfg = EstimatorConfig(K=10)
        stats = {}
        for name, make in (("lite", lite_arch), ("full", full_arch)):
            arch_net = VelocityNet.initialized(make(16, 64), Rng(13))
            runs = [measure_runtime(lambda n=arch_net: estimate(n, big, cfg, Rng(2)), n=3, warmup=1)
                    for _ in range(2)]
            stats[name] = min(runs, key=lambda r: r["p50_ms"])
        speed = stats["full"]["p50_ms"] / stats["lite"]["p50_ms"]
        mem = (stats["lite"]["peak_mem_bytes"], stats["full"]["peak_mem_bytes"])
        elapsed = time.perf_counter() - t0
        v.detail = (f"K200/K100 = {k_ratio:.2f}; full/lite time at 16x64 = {speed:.1f}x; "
                    f"peak mem lite {mem[0] / 2**20:.1f} MiB vs full {mem[1] / 2**20:.1f} MiB; "
                    f"{elapsed:.0f} s")
        assert 1.6 <= k_ratio <= 2.4
        assert speed >= 3.0
        assert mem[0] < mem[1]
        assert elapsed < 600


# ---------------------------------------------------------------- 11


def test_c11_reproducibility(request, desk, point_run, tmp_path):
    with criterion(request, 11, "bitwise reproducibility") as v:
        checks = []
        # datasets rebuilt from the same seeds give identical files
        d = DESK
        g = ArrayGeometry(d["n_t"], d["n_r"])
        again = build_dataset(g, get_profile("nlos-c-like"), d["n_test"], Rng(6002),
                              power=desk["train"].normalization_power)
        save_dataset(desk["nlos"], tmp_path / "a.fmch")
        save_dataset(again, tmp_path / "b.fmch")
        assert sha(tmp_path / "a.fmch") == sha(tmp_path / "b.fmch")
        checks.append("dataset digest")

        # a full re-run of the constant-target training gives the same checkpoint
        _, rel, path = _point_target_run(tmp_path)
        assert sha(path) == sha(point_run[2])
        assert rel.tobytes() == point_run[1].tobytes()
        checks.append("training checkpoint digest")

        # the desk sweep re-executed gives bitwise-identical NMSE and CSV files
        spec = desk["spec"]
        redo = run_sweep(SweepSpec(["proposed", "ls"], SNRS, datasets={"nlos": desk["nlos"]},
                                   models={"proposed": desk["net"]}, K=spec.K, seed=spec.seed,
                                   verbose=True))
        for row in redo.rows:
            old = desk["report"].row(row.method, "nlos", row.snr_db, row.alpha)
            assert np.array(row.per_sample).tobytes() == np.array(old.per_sample).tobytes()
        checks.append("per-sample NMSE")
        # same CSV once timing columns are blanked
        old = BenchReport([desk["report"].row(r.method, "nlos", r.snr_db, r.alpha)
                           for r in redo.rows])
        for name, rep in (("x.csv", old), ("y.csv", redo)):
            emit_csv(BenchReport([replace(r, mean_runtime_ms=0.0, peak_mem_bytes=0)
                                  for r in rep.rows]), tmp_path / name)
        assert sha(tmp_path / "x.csv") == sha(tmp_path / "y.csv")
        checks.append("report digest")
        v.detail = ", ".join(checks) + " identical"
