"""Command-line batch runner.

    mtairfl <kind> [--config FILE] [--out DIR] [--seed N] [--trials N] [--quick]

Kinds: lemma-check, interference-sweep, task-sweep, fl-train, check.
Every run writes its CSV tables plus ``manifest.json`` into ``--out``.
Exit codes: 0 ok, 1 configuration error, 2 runtime failure, 3 failed check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, experiments
from .fedlearn import TRACE_FIELDS, save_checkpoint
from .system import ConfigError, SystemConfig, config_from_mapping, load_config_file

log = logging.getLogger("mtairfl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
KINDS = ("lemma-check", "interference-sweep", "task-sweep", "fl-train", "check")

# system defaults per kind, overridden by the config file
_DEFAULTS = {
    "lemma-check": dict(n_tasks=2),
    "interference-sweep": dict(n_tasks=4, devices_per_cluster=25, n_shifters=64),
    "task-sweep": dict(n_tasks=2, devices_per_cluster=50, n_shifters=200),
    "fl-train": dict(n_tasks=2, devices_per_cluster=10, n_shifters=1024, quantization_bits=3,
                     power_budget=1.0, noise_variance=1.0),
    "check": dict(),
}


@dataclass
class ExperimentPlan:
    kind: str
    cfg: SystemConfig
    out: Path
    trials: int
    sweep: list = field(default_factory=list)
    options: dict[str, Any] = field(default_factory=dict)
    quick: bool = False


def _default_trials(kind: str) -> int:
    return {"lemma-check": 100_000, "interference-sweep": 10_000, "task-sweep": 10_000,
            "fl-train": 100, "check": 10_000}[kind]


_SWEEP_KEYS = {"lemma-check": "moment_grid", "interference-sweep": "n_shifters_grid",
               "task-sweep": "n_tasks_grid", "fl-train": "n_shifters_grid"}


def manifest_to_raw(manifest: dict[str, Any], kind: str) -> dict[str, Any]:
    """Config keys that rebuild the plan recorded in a run manifest."""
    if manifest.get("kind") != kind:
        raise ConfigError(f"manifest is for kind {manifest.get('kind')!r}, not {kind!r}")
    raw = dict(manifest["config"])
    raw["trials"] = manifest["trials"]
    if kind in _SWEEP_KEYS:
        raw[_SWEEP_KEYS[kind]] = manifest["sweep"]
    opts = manifest.get("options", {})
    for src, dst in (("schemes", "schemes"), ("workers", "workers"), ("bits", "bits"), ("seeds", "fl_seeds")):
        if src in opts:
            raw[dst] = opts[src]
    return raw


def build_plan(kind: str, raw: dict[str, Any], out: Path, seed: int | None, trials: int | None,
               quick: bool) -> ExperimentPlan:
    """Merge config-file keys, kind defaults and flags into a validated plan.

    ``raw`` may also be a previous run's manifest, which replays that run.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    if "kind" in raw and isinstance(raw.get("config"), dict):
        raw = manifest_to_raw(raw, kind)
    merged = {**_DEFAULTS[kind], **raw}
    if seed is not None:
        merged["seed"] = seed
    cfg = config_from_mapping(merged)
    n_trials = trials if trials is not None else int(merged.get("trials", _default_trials(kind)))
    if quick:
        n_trials = max(1, n_trials // 10)
    if n_trials < 1:
        raise ConfigError("trials must be positive")
    modes = [_parse_mode(m) for m in merged.get("schemes", experiments.SCHEMES)]
    opts: dict[str, Any] = {"schemes": modes, "workers": int(merged.get("workers", 1))}
    sweep: list = []
    if kind == "lemma-check":
        sweep = [tuple(int(x) for x in pair) for pair in merged.get("moment_grid", experiments.MOMENT_GRID)]
        opts["bits"] = [_parse_bits(b) for b in merged.get("bits", [None, 1, 2, 3])]
    elif kind == "interference-sweep":
        sweep = [int(x) for x in merged.get("n_shifters_grid", experiments.SHIFTER_GRID)]
        if len(sweep) < 4:
            raise ConfigError("interference-sweep needs at least 4 N_r values")
        bad = [x for x in sweep if x % cfg.n_tasks]
        if bad:
            raise ConfigError(f"N_r values {bad} not divisible by N={cfg.n_tasks}")
    elif kind == "task-sweep":
        sweep = [int(x) for x in merged.get("n_tasks_grid", experiments.TASK_GRID)]
        k = cfg.n_devices
        bad = [n for n in sweep if k % n or cfg.n_shifters % n]
        if bad:
            raise ConfigError(f"N values {bad} must divide K={k} and N_r={cfg.n_shifters}")
    elif kind == "fl-train":
        sweep = [int(x) for x in merged.get("n_shifters_grid", [64, 1024])]
        bad = [x for x in sweep if x % cfg.n_tasks]
        if bad:
            raise ConfigError(f"N_r values {bad} not divisible by N={cfg.n_tasks}")
        if cfg.n_tasks != 2:
            raise ConfigError("the built-in synthetic FL preset has exactly two tasks")
        opts["seeds"] = [int(s) for s in merged.get("fl_seeds", range(cfg.rng_seed, cfg.rng_seed + 5))]
        if quick:
            opts["seeds"] = opts["seeds"][:1]
    return ExperimentPlan(kind=kind, cfg=cfg, out=out, trials=n_trials, sweep=sweep, options=opts, quick=quick)


def _parse_mode(m):
    if isinstance(m, str) and m in ("continuous", "ro"):
        return m
    return int(m)


def _parse_bits(b):
    if b is None or b == "continuous":
        return None
    return int(b)


# --------------------------------------------------------------------------
# output helpers


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str] | None = None) -> None:
    fields = list(fields or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fields})


def _stats_rows(rows: Sequence[experiments.CheckRow]) -> list[dict]:
    return [r.as_dict() for r in rows]


# --------------------------------------------------------------------------
# kinds


def run_moment_check(plan: ExperimentPlan, stage: Path) -> bool:
    rows = experiments.moment_check(plan.sweep, plan.options["bits"], plan.cfg.n_tasks, plan.trials,
                                   plan.cfg.rng_seed, plan.options["workers"])
    write_csv(stage / "stats.csv", _stats_rows(rows))
    return all(r.passed for r in rows)


def run_interference_sweep(plan: ExperimentPlan, stage: Path) -> bool:
    rows, fits = experiments.shifter_sweep(plan.cfg, plan.sweep, plan.options["schemes"], plan.trials,
                                        plan.options["workers"])
    write_csv(stage / "fig1.csv", rows, ["n_shifters", "scheme", "bits", "power", "stderr"])
    slopes = [{"scheme": f.mode, "slope": f.slope, "intercept": f.intercept} for f in fits.values()]
    write_csv(stage / "slopes.csv", slopes)
    for s in slopes:
        log.info("%s: log-log slope %.4f", s["scheme"], s["slope"])
    return True


def run_task_sweep(plan: ExperimentPlan, stage: Path) -> bool:
    from .analysis import task_sweep

    rows = task_sweep(plan.cfg, plan.sweep, plan.options["schemes"], plan.trials,
                      workers=plan.options["workers"])
    write_csv(stage / "fig2.csv", rows, ["n_tasks", "scheme", "power", "stderr", "analytic"])
    for key, ok in experiments.task_trend_ok(rows).items():
        log.info("trend %s: %s", key, "ok" if ok else "violated")
    return True


def run_fl_train(plan: ExperimentPlan, stage: Path) -> bool:
    comp = experiments.fl_comparison(plan.cfg, plan.sweep, plan.options["seeds"], plan.trials)
    _write_fl_trace(stage / "trace.csv", comp.traces)
    summary = []
    for k, seed in enumerate(comp.seeds):
        for task in range(comp.ideal.shape[1]):
            summary.append({"seed": seed, "task": task, "scheme": "ideal", "n_shifters": 0,
                            "final_accuracy": comp.ideal[k, task]})
            for n_r in comp.n_shifters:
                summary.append({"seed": seed, "task": task, "scheme": "aircomp", "n_shifters": n_r,
                                "final_accuracy": comp.aircomp[n_r][k, task]})
    write_csv(stage / "summary.csv", summary)
    ckpt = stage / "checkpoints"
    ckpt.mkdir()
    for (seed, label, n_r), models in comp.final_models.items():
        for task, v in enumerate(models):
            name = f"seed{seed}_{label}_nr{n_r}_task{task}.txt"
            save_checkpoint(ckpt / name, v, plan.trials, task)
    for n_r in comp.n_shifters:
        log.info("N_r=%d: mean accuracy gap to ideal per task %s", n_r, np.round(comp.gap(n_r), 4))
    return True


def _write_fl_trace(path: Path, traces: Sequence[dict]) -> None:
    write_csv(path, traces, ["seed", "scheme", "n_shifters"] + TRACE_FIELDS)


def run_check(plan: ExperimentPlan, stage: Path) -> bool:
    """Built-in verification suite; the trial budget scales with ``--trials``."""
    scale = plan.trials / _default_trials("check")
    seed = plan.cfg.rng_seed

    def budget(n):
        return max(100, int(n * scale))

    rows = experiments.moment_check(((1, 1), (4, 16)), (None,), 2, budget(100_000), seed)
    rows += experiments.moment_check(((4, 16),), (1, 2, 3), 2, budget(100_000), seed)
    rows += experiments.quantization_ratio_check(SystemConfig(n_tasks=4, devices_per_cluster=25, n_shifters=256,
                                                  rng_seed=seed), n_trials=budget(10_000))
    rows += experiments.interference_check(5, budget(100_000), seed)
    sweep_rows, fits = experiments.shifter_sweep(
        SystemConfig(n_tasks=4, devices_per_cluster=5, n_shifters=64, rng_seed=seed),
        experiments.SHIFTER_GRID, experiments.SCHEMES, budget(2_000))
    rows += experiments.slope_check(fits, case="N=4 L=5")
    rows += experiments.decomposition_check(100, seed)
    write_csv(stage / "stats.csv", _stats_rows(rows))
    write_csv(stage / "fig1.csv", sweep_rows, ["n_shifters", "scheme", "bits", "power", "stderr"])
    failed = [r for r in rows if not r.passed]
    for r in failed:
        log.warning("FAILED %s %s %s: predicted %.6g, estimated %.6g", r.check, r.case, r.quantity,
                    r.predicted, r.estimated)
    return not failed


RUNNERS = {
    "lemma-check": run_moment_check,
    "interference-sweep": run_interference_sweep,
    "task-sweep": run_task_sweep,
    "fl-train": run_fl_train,
    "check": run_check,
}


def execute(plan: ExperimentPlan, argv: Sequence[str] = ()) -> int:
    """Run a plan into a staging directory and publish it only on success."""
    plan.out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=plan.out))
    start = time.perf_counter()
    try:
        ok = RUNNERS[plan.kind](plan, stage)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    manifest = {
        "kind": plan.kind,
        "config": plan.cfg.to_dict(),
        "seed": plan.cfg.rng_seed,
        "trials": plan.trials,
        "quick": plan.quick,
        "sweep": plan.sweep,
        "options": plan.options,
        "argv": list(argv),
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_s": round(time.perf_counter() - start, 3),
        "passed": ok,
    }
    (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    for item in stage.iterdir():
        target = plan.out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        shutil.move(str(item), target)
    stage.rmdir()
    return EXIT_OK if ok else EXIT_CHECK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtairfl", description=__doc__.split("\n")[0])
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", type=Path, help="YAML/JSON key-value config file")
    parser.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    parser.add_argument("--seed", type=int, help="master RNG seed (overrides the config)")
    parser.add_argument("--trials", type=int, help="Monte Carlo trials (FL: rounds)")
    parser.add_argument("--quick", action="store_true", help="10x fewer trials, for smoke tests")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        raw = load_config_file(args.config) if args.config else {}
        plan = build_plan(args.kind, raw, args.out, args.seed, args.trials, args.quick)
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code = execute(plan, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit code 2
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if code == EXIT_CHECK:
        print("one or more checks failed; see stats.csv", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
