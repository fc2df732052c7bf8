"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances and trial budgets are the published ones; run with ``-s`` to see
the lines inline, or read the "acceptance criteria" section of the summary.
"""

import time

import numpy as np

from mtairfl import cli, experiments
from mtairfl.analysis import task_sweep
from mtairfl.models import MLP, SoftmaxRegression, finite_difference_grad
from mtairfl.system import SystemConfig


def _worst(rows):
    failed = [r for r in rows if not r.passed]
    if failed:
        r = failed[0]
        return f"{len(failed)} failed, first {r.check} {r.case} {r.quantity}: {r.estimated:.5g} vs {r.predicted:.5g}"
    return f"{len(rows)} rows ok"


def test_criterion_01_continuous_moments(report):
    rows, times = [], []
    for l, m in experiments.MOMENT_GRID:
        t0 = time.perf_counter()
        rows += experiments.moment_check(((l, m),), (None,), n_trials=100_000)
        times.append(time.perf_counter() - t0)
    ok = all(r.passed for r in rows) and max(times) < 60
    report(1, ok, f"continuous-phase moments at 1e5 trials, slowest case {max(times):.1f}s; {_worst(rows)}")
    assert ok


def test_criterion_02_quantized_moments(report):
    rows, times = [], []
    for l, m in experiments.MOMENT_GRID:
        for b in (1, 2, 3):
            t0 = time.perf_counter()
            rows += experiments.moment_check(((l, m),), (b,), n_trials=100_000)
            times.append(time.perf_counter() - t0)
    ok = all(r.passed for r in rows) and max(times) < 60
    report(2, ok, f"quantized moments b=1..3 at 1e5 trials, slowest case {max(times):.1f}s; {_worst(rows)}")
    assert ok


def test_criterion_03_scaling_slopes(report):
    cfg = SystemConfig(n_tasks=4, devices_per_cluster=25, n_shifters=64)
    t0 = time.perf_counter()
    _, fits = experiments.shifter_sweep(cfg, experiments.SHIFTER_GRID, experiments.SCHEMES, n_trials=10_000)
    elapsed = time.perf_counter() - t0
    rows = experiments.slope_check(fits, tol=0.05)
    ok = all(r.passed for r in rows) and set(fits) == {"continuous", "b1", "b3", "ro"}
    slopes = ", ".join(f"{k} {v.slope:.4f}" for k, v in fits.items())
    report(3, ok, f"log-log slopes ({slopes}) within -1 +/- 0.05, {elapsed:.0f}s")
    assert ok


def test_criterion_04_quantization_ratio(report):
    rows = experiments.quantization_ratio_check(bits=(1, 2, 3, 4), n_trials=10_000, rtol=0.02)
    pred = {int(r.case.rsplit("=", 1)[1]): r.predicted for r in rows}
    formula_ok = abs(pred[1] - 2.467) < 5e-4 and abs(pred[3] - 1.053) < 5e-4
    ok = all(r.passed for r in rows) and formula_ok
    ratios = ", ".join(f"b{b} {r.estimated:.4f}/{r.predicted:.4f}" for b, r in zip(pred, rows))
    report(4, ok, f"measured/predicted ratio: {ratios}")
    assert ok


def test_criterion_05_interference_closed_form(report):
    rows = experiments.interference_check(count=5, n_trials=100_000, seed=0, rtol=0.02)
    errs = [abs(r.estimated / r.predicted - 1) for r in rows]
    ok = len(rows) == 5 and all(r.passed for r in rows)
    report(5, ok, f"5 random configs, max rel error {max(errs):.4f} (tol 0.02)")
    assert ok


def test_criterion_06_error_decomposition(report):
    rows = experiments.decomposition_check(n_trials=100, seed=0, tol=1e-10)
    worst = max(r.estimated for r in rows)
    ok = all(r.passed for r in rows)
    report(6, ok, f"100 trials, max abs deviation {worst:.2e} (tol 1e-10)")
    assert ok


def test_criterion_07_task_trend(report):
    cfg = SystemConfig(n_tasks=2, devices_per_cluster=50, n_shifters=200)
    rows = task_sweep(cfg, experiments.TASK_GRID, experiments.SCHEMES, n_trials=10_000)
    flags = experiments.task_trend_ok(rows)
    ok = all(flags.values()) and len(flags) == 7
    bad = [k for k, v in flags.items() if not v]
    report(7, ok, f"N in {experiments.TASK_GRID}: increasing + nondecreasing gap, failing flags {bad or 'none'}")
    assert ok


def test_criterion_08_federated_training(report):
    cfg = SystemConfig(n_tasks=2, devices_per_cluster=10, quantization_bits=3, power_budget=1.0,
                       noise_variance=1.0)
    assert cfg.n_devices == 20 and cfg.snr_db == 0.0
    seeds = range(5)
    t0 = time.perf_counter()
    comp = experiments.fl_comparison(cfg, (64, 1024), seeds, n_rounds=100, keep_trace=False)
    per_seed = (time.perf_counter() - t0) / len(seeds)
    gap_hi, gap_lo = comp.gap(1024), comp.gap(64)
    close = bool(np.all(np.abs(gap_hi) <= 0.02))
    larger = float(gap_lo.mean()) > float(gap_hi.mean())
    ok = close and larger and per_seed < 600
    report(8, ok, f"gap@1024 per task {np.round(gap_hi, 4).tolist()} (<= 0.02), "
                  f"mean gap@64 {gap_lo.mean():.4f} > mean gap@1024 {gap_hi.mean():.4f}, {per_seed:.1f}s/seed")
    assert ok


def test_criterion_09_gradients(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for model in (SoftmaxRegression(6, 4), MLP(5, 3, hidden=8)):
        x = rng.standard_normal((25, model.n_features))
        y = rng.integers(model.n_classes, size=25)
        for _ in range(20):
            v = rng.standard_normal(model.dim)
            num = finite_difference_grad(lambda w: model.loss(w, x, y), v)
            rel = np.linalg.norm(model.grad(v, x, y) - num) / np.linalg.norm(num)
            worst = max(worst, float(rel))
    ok = worst < 1e-5
    report(9, ok, f"20 points x 2 models, max relative error {worst:.2e} (tol 1e-5)")
    assert ok


def test_criterion_10_check_determinism(report, tmp_path):
    outs = [tmp_path / "run1", tmp_path / "run2"]
    codes = [cli.main(["check", "--seed", "0", "--out", str(o)]) for o in outs]
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    same = names and all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    ok = bool(same) and codes[0] == codes[1]
    report(10, ok, f"check run twice: {names} byte-identical={bool(same)}, exit codes {codes}")
    assert ok
