"""Monte Carlo estimators and closed-form predictions.

Trials are split into fixed-size chunks; chunk ``k`` of experiment ``e``
always draws from ``RandomStream(seed).batch(e, k)`` and partial results are
concatenated in chunk order, so estimates do not depend on the number of
worker threads.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .beamforming import (
    build_analog_continuous,
    build_ro_digital,
    compute_scaling_factor,
    effective_channels,
    quantize_phases,
    ro_effective_channels,
    sinc,
)
from .system import ConfigError, RandomStream, SystemConfig, sample_channel_batch

# experiment ids for RandomStream.batch
EXP_EFFECTIVE = 1
EXP_INTERFERENCE = 2

MIN_TRIALS = 1000
_CHUNK_ELEMENTS = 1 << 21


def _chunk_sizes(n_trials: int, per_trial: int) -> list[int]:
    size = max(1, _CHUNK_ELEMENTS // max(per_trial, 1))
    full, rest = divmod(n_trials, size)
    return [size] * full + ([rest] if rest else [])


def _run_chunks(fn: Callable, sizes: Sequence[int], workers: int) -> list:
    jobs = list(enumerate(sizes))
    if workers <= 1:
        return [fn(k, c) for k, c in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def mode_label(mode) -> str:
    if mode is None or mode == "continuous":
        return "continuous"
    if mode == "ro":
        return "ro"
    return f"b{int(mode)}"


def _mode_bits(mode) -> int | None:
    if mode is None or mode == "continuous":
        return None
    return int(mode)


# --------------------------------------------------------------------------
# closed forms


def predicted_own_mean(subarray_size: int, devices_per_cluster: int, bits: int | None = None) -> float:
    if bits is None:
        return math.sqrt(math.pi * subarray_size) / (2 * math.sqrt(devices_per_cluster))
    x = 2.0**-bits
    return math.sin(x * math.pi) * math.sqrt(subarray_size) / (2 * x * math.sqrt(math.pi * devices_per_cluster))


def predicted_own_variance(devices_per_cluster: int, bits: int | None = None) -> float:
    if bits is None:
        return 1 - math.pi / (4 * devices_per_cluster)
    x = 2.0**-bits
    return 1 - math.sin(x * math.pi) ** 2 / (4 * x * x * math.pi * devices_per_cluster)


def quantization_power_ratio(bits: int) -> float:
    """Interference power penalty of ``b``-bit phases, ``1/sinc^2(2^-b)``."""
    return float(1 / sinc(2.0**-bits) ** 2)


def analytic_interference(cfg: SystemConfig, zeta: float, powers: np.ndarray, mode=None) -> np.ndarray:
    """Per-task interference power ``d zeta^2 kappa sum_{i != n, l} p_{i,l}``.

    ``kappa = 1`` for the analog schemes and ``N_r L`` for RO.
    """
    per_cluster = np.asarray(powers).sum(axis=1)
    others = per_cluster.sum() - per_cluster
    kappa = cfg.n_shifters * cfg.devices_per_cluster if mode == "ro" else 1.0
    return cfg.model_dim * zeta**2 * kappa * others


# --------------------------------------------------------------------------
# effective channel statistics


@dataclass
class EffectiveChannelStats:
    mode: str
    n_trials: int
    own_mean: complex
    own_mean_se: float
    own_var: float
    own_var_se: float
    off_mean: complex
    off_mean_se: tuple[float, float]
    off_var: float
    off_var_se: float
    predicted_own_mean: float
    predicted_own_var: float
    warnings: list[str] = field(default_factory=list)

    def checks(self, mean_rtol: float = 0.01, var_rtol: float = 0.02) -> dict[str, bool]:
        out = {
            "own_mean": abs(self.own_mean.real - self.predicted_own_mean) <= mean_rtol * self.predicted_own_mean,
            "own_var": abs(self.own_var - self.predicted_own_var) <= var_rtol * self.predicted_own_var,
        }
        if not math.isnan(self.off_var):
            out["off_mean"] = (
                abs(self.off_mean.real) <= 3 * self.off_mean_se[0]
                and abs(self.off_mean.imag) <= 3 * self.off_mean_se[1]
            )
            out["off_var"] = abs(self.off_var - 1) <= var_rtol
        return out


def _moment_summary(first: np.ndarray, second: np.ndarray):
    """Pooled mean/variance with batch-means standard errors.

    ``first``/``second`` are per-trial averages of ``x`` and ``|x|^2``.
    """
    t = first.size
    mean = first.mean()
    var = float(second.mean() - abs(mean) ** 2)
    mean_se = (float(first.real.std(ddof=1) / math.sqrt(t)), float(first.imag.std(ddof=1) / math.sqrt(t)))
    centered = second - 2 * np.real(np.conj(mean) * first) + abs(mean) ** 2
    var_se = float(centered.std(ddof=1) / math.sqrt(t))
    return complex(mean), mean_se, var, var_se


def estimate_effective_channel_stats(
    cfg: SystemConfig,
    mode=None,
    n_trials: int = 100_000,
    seed: int | None = None,
    workers: int = 1,
) -> EffectiveChannelStats:
    """Monte Carlo mean/variance of own-task and cross-task effective channel entries.

    Every own entry ``a_n^H h_{n,l,n}`` (and every cross entry, ``i != n``)
    of a trial is pooled; standard errors come from per-trial averages.
    """
    if mode == "ro":
        raise ValueError("effective channel statistics are defined for the analog schemes")
    bits = _mode_bits(mode if mode is not None else cfg.quantization_bits)
    stream = RandomStream(cfg.rng_seed if seed is None else seed)
    n = cfg.n_tasks
    off_mask = ~np.eye(n, dtype=bool)  # [cluster i, subarray n]

    def chunk(k: int, size: int):
        rng = stream.batch(EXP_EFFECTIVE, k)
        channels = sample_channel_batch(cfg, rng, size)
        bf = build_analog_continuous(channels)
        if bits is not None:
            bf = quantize_phases(bf, bits)
        eff = effective_channels(bf, channels)  # (c, N, L, N)
        own = np.diagonal(eff, axis1=-3, axis2=-1)  # (c, L, N)
        out = [own.mean(axis=(1, 2)), (np.abs(own) ** 2).mean(axis=(1, 2))]
        if n > 1:
            off = np.moveaxis(eff, 2, -1)[:, off_mask]  # (c, N(N-1), L)
            out += [off.mean(axis=(1, 2)), (np.abs(off) ** 2).mean(axis=(1, 2))]
        return out

    parts = _run_chunks(chunk, _chunk_sizes(n_trials, cfg.n_devices * cfg.n_shifters), workers)
    cols = [np.concatenate(c) for c in zip(*parts)]
    own_mean, own_mean_se, own_var, own_var_se = _moment_summary(cols[0], cols[1])
    if n > 1:
        off_mean, off_mean_se, off_var, off_var_se = _moment_summary(cols[2], cols[3])
    else:
        off_mean, off_mean_se, off_var, off_var_se = complex("nan"), (math.nan, math.nan), math.nan, math.nan
    notes = []
    if n_trials < MIN_TRIALS:
        notes.append(f"only {n_trials} trials (< {MIN_TRIALS}); tolerances may not be met")
        warnings.warn(notes[-1])
    return EffectiveChannelStats(
        mode=mode_label(bits),
        n_trials=n_trials,
        own_mean=own_mean,
        own_mean_se=own_mean_se[0],
        own_var=own_var,
        own_var_se=own_var_se,
        off_mean=off_mean,
        off_mean_se=off_mean_se,
        off_var=off_var,
        off_var_se=off_var_se,
        predicted_own_mean=predicted_own_mean(cfg.subarray_size, cfg.devices_per_cluster, bits),
        predicted_own_var=predicted_own_variance(cfg.devices_per_cluster, bits),
        warnings=notes,
    )


# --------------------------------------------------------------------------
# interference power


@dataclass
class InterferenceReport:
    """Interference power of one receive scheme.

    Powers count both quadratures of the complex RF-chain output.
    ``elementwise`` is ``sum_n P_I,n / (d N)``.
    """

    mode: str
    cfg: SystemConfig
    n_trials: int
    per_task: np.ndarray
    per_task_se: np.ndarray
    elementwise: float
    elementwise_se: float
    analytic_per_task: np.ndarray
    analytic_elementwise: float
    zeta: float
    trivial: bool = False
    samples: np.ndarray | None = field(default=None, repr=False)  # per-trial elementwise power

    @property
    def relative_error(self) -> float:
        if self.analytic_elementwise == 0:
            return 0.0 if self.elementwise == 0 else math.inf
        return abs(self.elementwise / self.analytic_elementwise - 1)


def equal_weights(cfg: SystemConfig) -> tuple[np.ndarray, np.ndarray]:
    """``alpha = 1/L`` and unit standard deviation for every device."""
    shape = (cfg.n_tasks, cfg.devices_per_cluster)
    return np.full(shape, 1.0 / cfg.devices_per_cluster), np.ones(shape)


def interference_sweep_point(
    cfg: SystemConfig,
    modes: Iterable = ("continuous",),
    n_trials: int = 10_000,
    unit_signals: bool = False,
    seed: int | None = None,
    alpha: np.ndarray | None = None,
    v: np.ndarray | None = None,
    workers: int = 1,
) -> dict[str, InterferenceReport]:
    """Interference power of several schemes on shared channel draws.

    With ``unit_signals`` the devices send explicit i.i.d. N(0, 1) vectors of
    length ``d`` and the squared norm is measured; otherwise the signal
    average is taken analytically (``d * sum |coef|^2``), which removes the
    signal-sampling noise.
    """
    modes = list(modes)
    if alpha is None or v is None:
        alpha, v = equal_weights(cfg)
    n, l, d = cfg.n_tasks, cfg.devices_per_cluster, cfg.model_dim
    scalings = {mode_label(m): compute_scaling_factor(alpha, v, cfg, "continuous" if m is None else m) for m in modes}
    labels = [mode_label(m) for m in modes]
    stream = RandomStream(cfg.rng_seed if seed is None else seed)
    cross = ~np.eye(n, dtype=bool)  # [task n, cluster i]

    def chunk(k: int, size: int):
        rng = stream.batch(EXP_INTERFERENCE, k)
        channels = sample_channel_batch(cfg, rng, size)
        s = rng.standard_normal((size, n, l, d)) if unit_signals and n > 1 else None
        cont = None
        out = {}
        for m, label in zip(modes, labels):
            sc = scalings[label]
            if label == "ro":
                eff = ro_effective_channels(build_ro_digital(channels), channels)
            else:
                if cont is None:
                    cont = build_analog_continuous(channels)
                bits = _mode_bits(m)
                bf = cont if bits is None else quantize_phases(cont, bits)
                eff = effective_channels(bf, channels)
            # coef[c, n, i, l] = zeta sqrt(p_il) * (effective channel of (i,l) at chain n)
            coef = sc.zeta * np.sqrt(sc.powers)[None, None] * np.moveaxis(eff, -1, 1)
            coef = coef * cross[None, :, :, None]
            if s is None:
                power = d * (np.abs(coef) ** 2).sum(axis=(2, 3))
            else:
                interf = np.einsum("cnil,cild->cnd", coef, s)
                power = (np.abs(interf) ** 2).sum(axis=-1)
            out[label] = power  # (c, N)
        return out

    parts = _run_chunks(chunk, _chunk_sizes(n_trials, cfg.n_devices * cfg.n_shifters), workers)
    reports = {}
    for m, label in zip(modes, labels):
        per_trial = np.concatenate([p[label] for p in parts])  # (T, N)
        sc = scalings[label]
        analytic = analytic_interference(cfg, sc.zeta, sc.powers, "ro" if label == "ro" else None)
        elem = per_trial.sum(axis=1) / (d * n)
        t = per_trial.shape[0]
        reports[label] = InterferenceReport(
            mode=label,
            cfg=cfg,
            n_trials=t,
            per_task=per_trial.mean(axis=0),
            per_task_se=per_trial.std(axis=0, ddof=1) / math.sqrt(t),
            elementwise=float(elem.mean()),
            elementwise_se=float(elem.std(ddof=1) / math.sqrt(t)),
            analytic_per_task=analytic,
            analytic_elementwise=float(analytic.sum() / (d * n)),
            zeta=sc.zeta,
            trivial=n == 1,
            samples=elem,
        )
    return reports


def estimate_interference_power(
    cfg: SystemConfig, mode=None, n_trials: int = 10_000, unit_signals: bool = True, **kwargs
) -> InterferenceReport:
    """Monte Carlo interference power of a single scheme (see :func:`interference_sweep_point`)."""
    if mode is None:
        mode = cfg.quantization_bits if cfg.quantization_bits is not None else "continuous"
    return interference_sweep_point(cfg, [mode], n_trials, unit_signals, **kwargs)[mode_label(mode)]


def ro_interference_power(cfg: SystemConfig, n_trials: int = 10_000, **kwargs) -> InterferenceReport:
    """Interference of the fully-digital RO baseline.

    The RO combiner is scaled so that its mean desired coefficient
    (``zeta N_r sqrt(p)``) equals the analog scheme's, making the powers
    directly comparable.
    """
    kwargs.setdefault("unit_signals", False)
    return estimate_interference_power(cfg, "ro", n_trials, **kwargs)


@dataclass
class RatioEstimate:
    bits: int
    measured: float
    stderr: float
    predicted: float

    @property
    def relative_error(self) -> float:
        return abs(self.measured / self.predicted - 1)


def quantization_ratio(
    cfg: SystemConfig, bits: int, n_trials: int = 10_000, unit_signals: bool = False, **kwargs
) -> RatioEstimate:
    """Measured ``P_I^D / P_I`` on paired channel draws, delta-method stderr."""
    reps = interference_sweep_point(cfg, ["continuous", bits], n_trials, unit_signals, **kwargs)
    q, c = reps[mode_label(bits)], reps["continuous"]
    x, y = q.samples, c.samples
    ratio = x.mean() / y.mean()
    resid = (x - ratio * y) / y.mean()
    se = float(resid.std(ddof=1) / math.sqrt(x.size))
    return RatioEstimate(bits=bits, measured=float(ratio), stderr=se, predicted=quantization_power_ratio(bits))


# --------------------------------------------------------------------------
# scaling law and task sweep


@dataclass
class ScalingFit:
    mode: str
    n_shifters: np.ndarray
    power: np.ndarray
    stderr: np.ndarray
    slope: float
    intercept: float


def loglog_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Ordinary least squares of ``log y`` on ``log x``; returns (slope, intercept)."""
    slope, intercept = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope), float(intercept)


def fit_scaling_law(
    cfg_base: SystemConfig,
    n_r_grid: Sequence[int],
    modes: Iterable = ("continuous", 1, 3, "ro"),
    n_trials: int = 10_000,
    seed: int | None = None,
    unit_signals: bool = False,
    workers: int = 1,
) -> dict[str, ScalingFit]:
    """Element-wise interference power over an ``N_r`` grid and its log-log slope."""
    grid = [int(x) for x in n_r_grid]
    if len(grid) < 4:
        raise ConfigError("scaling fit needs at least 4 grid points")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("N_r grid must be strictly increasing")
    modes = list(modes)
    points = []
    for n_r in grid:
        if n_r % cfg_base.n_tasks:
            raise ConfigError(f"N_r={n_r} is not divisible by N={cfg_base.n_tasks}")
        cfg = cfg_base.replace(n_shifters=n_r)
        points.append(interference_sweep_point(cfg, modes, n_trials, unit_signals, seed=seed, workers=workers))
    fits = {}
    for m in modes:
        label = mode_label(m)
        power = np.array([p[label].elementwise for p in points])
        se = np.array([p[label].elementwise_se for p in points])
        slope, intercept = loglog_fit(grid, power)
        fits[label] = ScalingFit(label, np.array(grid), power, se, slope, intercept)
    return fits


def task_sweep(
    cfg_base: SystemConfig,
    n_values: Sequence[int],
    modes: Iterable = ("continuous", 1, 3, "ro"),
    n_trials: int = 10_000,
    seed: int | None = None,
    unit_signals: bool = False,
    workers: int = 1,
) -> list[dict]:
    """Element-wise interference versus the number of tasks at fixed ``K`` and ``N_r``.

    ``cfg_base.n_devices`` is held fixed; each ``N`` must divide both ``K``
    and ``N_r``.
    """
    k = cfg_base.n_devices
    modes = list(modes)
    rows = []
    for n in n_values:
        if k % n:
            raise ConfigError(f"K={k} devices cannot be split into N={n} equal clusters")
        cfg = cfg_base.replace(n_tasks=int(n), devices_per_cluster=k // int(n))
        point = interference_sweep_point(cfg, modes, n_trials, unit_signals, seed=seed, workers=workers)
        for m in modes:
            rep = point[mode_label(m)]
            rows.append({"n_tasks": int(n), "scheme": rep.mode, "power": rep.elementwise,
                         "stderr": rep.elementwise_se, "analytic": rep.analytic_elementwise})
    return rows
