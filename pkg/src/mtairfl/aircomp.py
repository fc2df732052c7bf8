"""Uplink over-the-air aggregation for several tasks at once.

Devices normalize their updates, transmit simultaneously with no transmit
CSI, and the parameter server reads task ``n`` off RF chain ``n``.  The
``N_r x d`` received matrix is never formed: the receiver is linear, so each
RF-chain output is assembled from per-device effective coefficients plus the
combined noise.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .beamforming import AnalogBeamformer, effective_channels, ro_effective_channels
from .system import ChannelRealization


@dataclass
class LocalUpdate:
    """A device's accumulated gradient and its normalization statistics."""

    g: np.ndarray
    mu: float
    v: float
    alpha: float
    s: np.ndarray
    degenerate: bool = False


def normalize(g: np.ndarray, alpha: float) -> LocalUpdate:
    """Standardize ``g`` to zero mean, unit (population) standard deviation.

    Near-constant updates (std below ``1e-12 * max(1, |g|_inf)``) are flagged
    degenerate and sent as ``s = 0``; the server rebuilds them from ``mu``.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("update must be a nonempty vector")
    if not np.all(np.isfinite(g)):
        raise ValueError("update contains non-finite entries")
    mu = float(g.mean())
    v = float(g.std())
    tol = 1e-12 * max(1.0, float(np.abs(g).max()))
    if v < tol:
        return LocalUpdate(g=g, mu=mu, v=0.0, alpha=float(alpha), s=np.zeros_like(g), degenerate=True)
    return LocalUpdate(g=g, mu=mu, v=v, alpha=float(alpha), s=(g - mu) / v)


def denormalize(update: LocalUpdate) -> np.ndarray:
    return update.v * update.s + update.mu


@dataclass
class UpdateGrid:
    """Stacked per-device statistics, every array indexed ``[task, device]``."""

    alpha: np.ndarray
    mu: np.ndarray
    v: np.ndarray
    s: np.ndarray  # (N, L, d)
    g: np.ndarray  # (N, L, d)

    @classmethod
    def from_updates(cls, updates: Sequence[Sequence[LocalUpdate]]) -> "UpdateGrid":
        return cls(
            alpha=np.array([[u.alpha for u in row] for row in updates]),
            mu=np.array([[u.mu for u in row] for row in updates]),
            v=np.array([[u.v for u in row] for row in updates]),
            s=np.array([[u.s for u in row] for row in updates]),
            g=np.array([[u.g for u in row] for row in updates]),
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.s.shape


@dataclass
class ReceivedSignals:
    """RF-chain outputs of one round and the pieces they were built from.

    ``coefficients[n, i, l]`` is the complex gain of device ``(i, l)`` at
    RF chain ``n``; ``noise_terms[n]`` is the combined noise at that chain.
    """

    y: np.ndarray  # (N, d) complex
    coefficients: np.ndarray  # (N, N, L) complex
    noise_terms: np.ndarray  # (N, d) complex


def _receive_coefficients(receiver, channels: ChannelRealization) -> np.ndarray:
    if isinstance(receiver, AnalogBeamformer):
        eff = effective_channels(receiver, channels)
    else:
        eff = ro_effective_channels(np.asarray(receiver), channels)
    return np.moveaxis(eff, -1, 0)  # (N_task, N_cluster, L)


def _combined_noise(receiver, noise: np.ndarray, n_tasks: int) -> np.ndarray:
    if isinstance(receiver, AnalogBeamformer):
        m = receiver.subarray_size
        blocks = noise.reshape(n_tasks, m, -1)
        return np.einsum("nm,nmd->nd", receiver.weights.conj(), blocks)
    return np.asarray(receiver).conj() @ noise


def transmit_round(
    updates: Sequence[Sequence[LocalUpdate]] | UpdateGrid,
    channels: ChannelRealization,
    receiver: AnalogBeamformer | np.ndarray,
    zeta: float,
    noise: np.ndarray,
    powers: np.ndarray | None = None,
    amplitudes: np.ndarray | None = None,
) -> ReceivedSignals:
    """Superpose all devices' normalized updates and apply the receiver.

    ``receiver`` is an :class:`AnalogBeamformer` (digital combiner
    ``zeta * I``) or an ``(N, N_r)`` array of fully-digital combiners
    (scaled by ``zeta`` as well).  Devices transmit with amplitude
    ``sqrt(powers)``, or with explicit complex ``amplitudes`` instead.
    """
    grid = updates if isinstance(updates, UpdateGrid) else UpdateGrid.from_updates(updates)
    n, l, d = grid.shape
    h = channels.h
    if h.shape[:2] != (n, l):
        raise ValueError(f"channels for {h.shape[:2]} devices, updates for {(n, l)}")
    if noise.shape != (h.shape[-1], d):
        raise ValueError(f"noise shape {noise.shape} != {(h.shape[-1], d)}")
    if (powers is None) == (amplitudes is None):
        raise ValueError("give exactly one of powers and amplitudes")
    amp = np.sqrt(np.asarray(powers, dtype=float)) if amplitudes is None else np.asarray(amplitudes)
    if amp.shape != (n, l):
        raise ValueError(f"power/amplitude shape {amp.shape} != {(n, l)}")

    coeff = zeta * amp[None] * _receive_coefficients(receiver, channels)
    y_signal = np.einsum("nil,ild->nd", coeff, grid.s)
    noise_terms = zeta * _combined_noise(receiver, noise, n)
    return ReceivedSignals(y=y_signal + noise_terms, coefficients=coeff, noise_terms=noise_terms)


@dataclass
class RealPartResult:
    value: np.ndarray
    imag_energy: float
    imag_ratio: float


def real_part_policy(y: np.ndarray) -> RealPartResult:
    """Keep ``Re(y)``; report the discarded imaginary energy (absolute and relative)."""
    y = np.asarray(y)
    re = np.real(y).astype(float)
    imag_energy = float(np.sum(np.imag(y) ** 2))
    re_energy = float(np.sum(re**2))
    ratio = imag_energy / re_energy if re_energy > 0 else (0.0 if imag_energy == 0 else float("inf"))
    return RealPartResult(value=re, imag_energy=imag_energy, imag_ratio=ratio)


@dataclass
class AggregationOutcome:
    """Estimated vs true global update of one task, with the error split.

    ``terms`` holds the real (weight distortion, inter-task interference,
    noise) vectors that sum to ``error``; ``complex_terms`` are the same
    terms before the real part is taken.
    """

    task: int
    g_hat: np.ndarray
    g_true: np.ndarray
    error: np.ndarray
    terms: tuple[np.ndarray, np.ndarray, np.ndarray]
    complex_terms: tuple[np.ndarray, np.ndarray, np.ndarray]
    imag_ratio: float = 0.0
    extra: dict = field(default_factory=dict)

    def term_energies(self, complex_valued: bool = True) -> tuple[float, float, float]:
        """Squared norms of the three terms (both quadratures by default)."""
        src = self.complex_terms if complex_valued else self.terms
        return tuple(float(np.sum(np.abs(t) ** 2)) for t in src)


def estimate_global_update(
    received: ReceivedSignals,
    task: int,
    updates: Sequence[Sequence[LocalUpdate]] | UpdateGrid,
) -> AggregationOutcome:
    """Denormalize RF chain ``task`` and split the estimation error.

    ``g_hat = Re(y_n) + sum_l alpha mu``.  Degenerate devices sent nothing,
    so their (numerically tiny) deviation from ``mu * 1`` lands in the
    weight-distortion term, which keeps the split exact.
    """
    grid = updates if isinstance(updates, UpdateGrid) else UpdateGrid.from_updates(updates)
    n = task
    y = received.y[n]
    part = real_part_policy(y)
    alpha, mu = grid.alpha[n], grid.mu[n]
    g_hat = part.value + np.dot(alpha, mu)
    g_true = np.einsum("l,ld->d", alpha, grid.g[n])

    coeff = received.coefficients[n]  # (N, L)
    desired = np.einsum("l,ld->d", alpha, grid.g[n] - mu[:, None])
    weight_c = np.einsum("l,ld->d", coeff[n], grid.s[n]) - desired
    others = np.arange(coeff.shape[0]) != n
    interf_c = np.einsum("il,ild->d", coeff[others], grid.s[others])
    noise_c = received.noise_terms[n]

    terms = (np.real(weight_c), np.real(interf_c), np.real(noise_c))
    return AggregationOutcome(
        task=n,
        g_hat=g_hat,
        g_true=g_true,
        error=g_hat - g_true,
        terms=terms,
        complex_terms=(weight_c, interf_c, noise_c),
        imag_ratio=part.imag_ratio,
    )


TRACE_FIELDS = ["round", "task", "error_energy", "weight_energy", "interference_energy",
                "noise_energy", "imag_ratio"]


def trace_row(outcome: AggregationOutcome, round_index: int) -> dict:
    w, i, nz = outcome.term_energies()
    return {
        "round": round_index,
        "task": outcome.task,
        "error_energy": float(np.sum(outcome.error**2)),
        "weight_energy": w,
        "interference_energy": i,
        "noise_energy": nz,
        "imag_ratio": outcome.imag_ratio,
    }


def append_trace(path: str | Path, rows: Sequence[dict]) -> None:
    """Append round-level records to a CSV trace, writing the header once."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in TRACE_FIELDS})
