"""FedAvg for several tasks trained side by side.

Each task owns one device cluster.  A round is: broadcast, ``E`` local
mini-batch SGD steps per device, then aggregation, either exact (``ideal``)
or through the over-the-air pipeline (``aircomp``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aircomp
from .beamforming import (
    build_analog,
    build_ro_digital,
    compute_scaling_factor,
    effective_channels,
    realization_matched_amplitudes,
)
from .models import build_model
from .system import ConfigError, RandomStream, SystemConfig, sample_channels, sample_noise


@dataclass
class TaskDescriptor:
    """Recipe for one synthetic Gaussian-mixture classification task.

    ``separation`` is the distance between any two class means in units of
    the (isotropic) class standard deviation; ``feature_scale`` multiplies
    all inputs afterwards.
    """

    n_classes: int = 2
    n_features: int = 10
    separation: float = 6.0
    feature_scale: float = 1.0
    samples_per_device: int | Sequence[int] = 100
    test_fraction: float = 0.2
    model: str = "logistic"
    hidden: int = 16
    l2: float = 0.0
    lr: float = 0.01
    local_steps: int = 1
    batch_size: int = 64


@dataclass
class TaskSpec:
    model: object
    partitions: list[tuple[np.ndarray, np.ndarray]]
    test: tuple[np.ndarray, np.ndarray]
    lr: float = 0.01
    local_steps: int = 1
    batch_size: int = 64
    class_means: np.ndarray | None = None

    def __post_init__(self) -> None:
        if any(len(y) == 0 for _, y in self.partitions):
            raise ConfigError("every device needs a nonempty local dataset")
        if self.local_steps < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("need local_steps >= 1, lr > 0, batch_size >= 1")

    @property
    def weights(self) -> np.ndarray:
        sizes = np.array([len(y) for _, y in self.partitions], dtype=float)
        return sizes / sizes.sum()

    def train_loss(self, v: np.ndarray) -> float:
        v = v[: self.model.dim]
        return float(sum(a * self.model.loss(v, x, y) for a, (x, y) in zip(self.weights, self.partitions)))

    def accuracy(self, v: np.ndarray) -> float:
        x, y = self.test
        return float(np.mean(self.model.predict(v[: self.model.dim], x) == y))


def make_synthetic_tasks(
    descriptors: Sequence[TaskDescriptor], devices_per_cluster: int, seed: int = 0
) -> list[TaskSpec]:
    """Generate one Gaussian-mixture task per descriptor, split over ``L`` devices."""
    stream = RandomStream(seed)
    tasks = []
    for n, desc in enumerate(descriptors):
        sizes = desc.samples_per_device
        sizes = [int(sizes)] * devices_per_cluster if np.isscalar(sizes) else [int(s) for s in sizes]
        if len(sizes) != devices_per_cluster:
            raise ConfigError(f"task {n}: {len(sizes)} sizes for {devices_per_cluster} devices")
        if min(sizes) < 1 or desc.n_classes < 2 or desc.n_features < 1:
            raise ConfigError(f"task {n}: sizes, classes and features must be positive")
        if not 0 < desc.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        rng = stream.data(0, n)
        means = _class_means(rng, desc.n_classes, desc.n_features, desc.separation)
        n_train = sum(sizes)
        n_test = max(1, round(n_train * desc.test_fraction / (1 - desc.test_fraction)))
        labels = rng.integers(desc.n_classes, size=n_train + n_test)
        x = desc.feature_scale * (means[labels] + rng.standard_normal((labels.size, desc.n_features)))
        bounds = np.cumsum([0, *sizes])
        parts = [(x[a:b], labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        model = build_model(desc.model, desc.n_features, desc.n_classes, desc.hidden, desc.l2)
        tasks.append(TaskSpec(
            model=model,
            partitions=parts,
            test=(x[n_train:], labels[n_train:]),
            lr=desc.lr,
            local_steps=desc.local_steps,
            batch_size=desc.batch_size,
            class_means=means,
        ))
    return tasks


def _class_means(rng: np.random.Generator, n_classes: int, n_features: int, separation: float) -> np.ndarray:
    # orthonormal directions give equal pairwise distance sqrt(2) * radius
    if n_classes <= n_features:
        q, _ = np.linalg.qr(rng.standard_normal((n_features, n_classes)))
        return q.T * (separation / np.sqrt(2))
    means = rng.standard_normal((n_classes, n_features))
    return means / np.linalg.norm(means, axis=1, keepdims=True) * (separation / np.sqrt(2))


def common_dim(tasks: Sequence[TaskSpec]) -> int:
    """Shared parameter length; smaller models are zero-padded."""
    return max(t.model.dim for t in tasks)


def local_update(
    task: TaskSpec, v_global: np.ndarray, device: int, rng: np.random.Generator, alpha: float | None = None
) -> aircomp.LocalUpdate:
    """Run ``E`` mini-batch SGD steps and return the accumulated gradient.

    Mini-batches are drawn without replacement from a fresh permutation of
    the local data; a new permutation starts when one is exhausted.
    """
    model = task.model
    x, y = task.partitions[device]
    dim = model.dim
    v = np.array(v_global[:dim], dtype=float)
    total = np.zeros(dim)
    order = rng.permutation(len(y))
    pos = 0
    for _ in range(task.local_steps):
        if pos >= len(y):
            order = rng.permutation(len(y))
            pos = 0
        idx = order[pos:pos + task.batch_size]
        pos += task.batch_size
        grad = model.grad(v, x[idx], y[idx])
        total += grad
        v -= task.lr * grad
    g = np.zeros(len(v_global))
    g[:dim] = total
    if alpha is None:
        alpha = float(task.weights[device])
    return aircomp.normalize(g, alpha)


@dataclass
class RoundResult:
    models: list[np.ndarray]
    records: list[dict]
    outcomes: list[aircomp.AggregationOutcome] = field(default_factory=list)


def global_round(
    tasks: Sequence[TaskSpec],
    models: Sequence[np.ndarray],
    cfg: SystemConfig,
    round_index: int,
    mode: str = "ideal",
    scheme: str = "analog",
    matching: str = "statistical",
) -> RoundResult:
    """One FedAvg round for all tasks.

    ``mode`` is ``"ideal"`` (exact weighted average) or ``"aircomp"``.  For
    air computation, ``scheme`` picks the analog beamformer (phase bits from
    ``cfg.quantization_bits``) or the fully-digital ``"ro"`` baseline, and
    ``matching="realization"`` switches to genie amplitudes that invert each
    device's effective channel, so the weight distortion vanishes (a test
    oracle).
    """
    if mode not in ("ideal", "aircomp"):
        raise ValueError(f"unknown mode {mode!r}")
    n, l = cfg.n_tasks, cfg.devices_per_cluster
    if len(tasks) != n or len(models) != n:
        raise ValueError(f"expected {n} tasks and models")
    d = len(models[0])
    if cfg.model_dim != d:
        raise ValueError(f"cfg.model_dim={cfg.model_dim} but models have length {d}")
    stream = RandomStream(cfg.rng_seed)
    updates = [
        [local_update(tasks[i], models[i], j, stream.data(1, round_index, i, j)) for j in range(l)]
        for i in range(n)
    ]
    grid = aircomp.UpdateGrid.from_updates(updates)
    g_true = np.einsum("nl,nld->nd", grid.alpha, grid.g)

    outcomes: list[aircomp.AggregationOutcome] = []
    if mode == "ideal":
        g_est = g_true
    else:
        channels = sample_channels(cfg, stream, round_index)
        if scheme == "ro":
            receiver = build_ro_digital(channels)
            scaling = compute_scaling_factor(grid.alpha, grid.v, cfg, "ro")
        elif scheme == "analog":
            receiver = build_analog(channels, cfg.quantization_bits)
            scaling = compute_scaling_factor(grid.alpha, grid.v, cfg)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        powers, amplitudes = scaling.powers, None
        if matching == "realization":
            if scheme != "analog":
                raise ValueError("realization matching is implemented for the analog scheme")
            own = np.diagonal(effective_channels(receiver, channels), axis1=0, axis2=2).T  # (N, L)
            powers, amplitudes = None, realization_matched_amplitudes(own, grid.alpha, grid.v, scaling.zeta)
        elif matching != "statistical":
            raise ValueError(f"unknown matching {matching!r}")
        noise = sample_noise(cfg, stream, round_index)
        received = aircomp.transmit_round(grid, channels, receiver, scaling.zeta, noise, powers, amplitudes)
        outcomes = [aircomp.estimate_global_update(received, i, grid) for i in range(n)]
        g_est = np.stack([o.g_hat for o in outcomes])

    new_models = [models[i] - tasks[i].lr * g_est[i] for i in range(n)]
    records = []
    for i in range(n):
        rec = {
            "round": round_index,
            "task": i,
            "loss": tasks[i].train_loss(new_models[i]),
            "accuracy": tasks[i].accuracy(new_models[i]),
            "update_norm": float(np.linalg.norm(g_true[i])),
            "error_norm": 0.0,
            "weight_energy": 0.0,
            "interference_energy": 0.0,
            "noise_energy": 0.0,
        }
        if outcomes:
            o = outcomes[i]
            rec["error_norm"] = float(np.linalg.norm(o.error))
            rec["weight_energy"], rec["interference_energy"], rec["noise_energy"] = o.term_energies()
        records.append(rec)
    return RoundResult(new_models, records, outcomes)


def initial_models(tasks: Sequence[TaskSpec], seed: int) -> list[np.ndarray]:
    """Zero-padded starting points, drawn from a per-task stream."""
    d = common_dim(tasks)
    stream = RandomStream(seed)
    out = []
    for i, task in enumerate(tasks):
        v = np.zeros(d)
        v[: task.model.dim] = task.model.init(stream.data(2, i))
        out.append(v)
    return out


@dataclass
class TrainingResult:
    models: list[np.ndarray]
    trace: list[dict]

    def final_accuracy(self) -> list[float]:
        last = max(r["round"] for r in self.trace)
        return [r["accuracy"] for r in sorted(self.trace, key=lambda r: r["task"]) if r["round"] == last]


def train(
    tasks: Sequence[TaskSpec],
    cfg: SystemConfig,
    n_rounds: int,
    mode: str = "ideal",
    scheme: str = "analog",
    matching: str = "statistical",
    models: Sequence[np.ndarray] | None = None,
) -> TrainingResult:
    """Run ``n_rounds`` of multi-task FedAvg; ``cfg.model_dim`` is set to the padded size."""
    cfg = cfg.replace(model_dim=common_dim(tasks))
    if cfg.n_tasks != len(tasks):
        raise ConfigError(f"cfg has {cfg.n_tasks} tasks, got {len(tasks)}")
    models = list(models) if models is not None else initial_models(tasks, cfg.rng_seed)
    trace: list[dict] = []
    for t in range(n_rounds):
        res = global_round(tasks, models, cfg, t, mode, scheme, matching)
        models = res.models
        trace.extend(res.records)
    return TrainingResult(models, trace)


TRACE_FIELDS = ["round", "task", "loss", "accuracy", "update_norm", "error_norm",
                "weight_energy", "interference_energy", "noise_energy"]


def write_trace(path: str | Path, trace: Sequence[dict], extra: dict | None = None) -> None:
    fields = list(extra or {}) + TRACE_FIELDS
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in trace:
            writer.writerow({**(extra or {}), **{k: _fmt(row[k]) for k in TRACE_FIELDS}})


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def save_checkpoint(path: str | Path, v: np.ndarray, round_index: int, task: int) -> None:
    """Flat parameter vector, one value per line, under a one-line text header."""
    header = f"dim={len(v)} round={round_index} task={task}"
    np.savetxt(path, np.asarray(v, dtype=float), fmt="%.17g", header=header)


def load_checkpoint(path: str | Path) -> tuple[np.ndarray, dict]:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise ValueError(f"{path}: missing checkpoint header")
    meta = dict(item.split("=") for item in first[1:].split())
    meta = {k: int(val) for k, val in meta.items()}
    v = np.atleast_1d(np.loadtxt(path))
    if v.size != meta["dim"]:
        raise ValueError(f"{path}: header says dim={meta['dim']}, found {v.size} values")
    return v, meta
