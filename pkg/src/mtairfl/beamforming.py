"""Receive beamforming at the parameter server.

Two schemes live here:

* the sub-connected analog beamformer, where subarray ``n`` co-phases the
  summed channels of cluster ``n`` (optionally with ``b``-bit phase shifters),
  followed by a shared digital scaling ``zeta * I``;
* the fully-digital random-orthogonalization (RO) baseline, which combines
  with the plain sum of the target cluster's channel vectors.

Arrays follow the layout of :class:`~mtairfl.system.ChannelRealization` and
may carry leading Monte Carlo axes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .system import ChannelRealization, ConfigError, SystemConfig

TWO_PI = 2 * np.pi


@dataclass
class AnalogBeamformer:
    """Phase-only subarray weights ``a_n[m] = exp(j phi_n[m]) / sqrt(M)``.

    ``phases`` has shape ``(..., N, M)`` with values in ``[0, 2*pi)``;
    ``bits`` is ``None`` for continuous phase shifters.
    """

    phases: np.ndarray
    bits: int | None = None

    @property
    def n_subarrays(self) -> int:
        return self.phases.shape[-2]

    @property
    def subarray_size(self) -> int:
        return self.phases.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(1j * self.phases) / np.sqrt(self.subarray_size)

    def matrix(self) -> np.ndarray:
        """Explicit block-diagonal ``N x N_r`` matrix whose row ``n`` is ``a_n^H``."""
        if self.phases.ndim != 2:
            raise ValueError("matrix() needs a single (unbatched) beamformer")
        n, m = self.phases.shape
        out = np.zeros((n, n * m), dtype=complex)
        conj = self.weights.conj()
        for k in range(n):
            out[k, k * m:(k + 1) * m] = conj[k]
        return out


def codebook(bits: int) -> np.ndarray:
    """Phase set {0, 2pi/2^b, ..., (2^b - 1) 2pi/2^b}."""
    if bits < 1:
        raise ConfigError(f"quantization needs at least one bit, got {bits}")
    return np.arange(2**bits) * (TWO_PI / 2**bits)


def wrap_phase(x: np.ndarray) -> np.ndarray:
    """Map angles to (-pi, pi]."""
    out = np.mod(x + np.pi, TWO_PI) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def build_analog_continuous(channels: ChannelRealization) -> AnalogBeamformer:
    """Co-phase subarray ``n`` with the summed cluster-``n`` channels on that subarray.

    An exactly zero sum gets phase 0 (``np.angle(0) == 0``).
    """
    own = np.diagonal(channels.blocks, axis1=-4, axis2=-2)  # (..., L, M, N)
    summed = own.sum(axis=-3)  # (..., M, N)
    phases = np.mod(np.angle(summed), TWO_PI)
    return AnalogBeamformer(phases=np.swapaxes(phases, -1, -2), bits=None)


def quantize_phases(bf: AnalogBeamformer, bits: int) -> AnalogBeamformer:
    """Round each phase to the nearest codeword under wrapped distance.

    The squared-norm objective over the codebook is separable, so entrywise
    rounding solves it.  Exact midpoints go to the larger codeword (the
    codeword above ``2pi - step/2`` is 0).
    """
    if bf.bits is not None:
        raise ValueError("beamformer is already quantized")
    if bits < 1:
        raise ConfigError(f"quantization needs at least one bit, got {bits}")
    levels = 2**bits
    step = TWO_PI / levels
    index = np.mod(np.floor(bf.phases / step + 0.5), levels)
    return AnalogBeamformer(phases=index * step, bits=bits)


def quantization_error(continuous: AnalogBeamformer, quantized: AnalogBeamformer) -> np.ndarray:
    """Wrapped phase error ``psi`` in ``(-2^-b pi, 2^-b pi]``."""
    return wrap_phase(quantized.phases - continuous.phases)


def build_analog(channels: ChannelRealization, bits: int | None = None) -> AnalogBeamformer:
    bf = build_analog_continuous(channels)
    return bf if bits is None else quantize_phases(bf, bits)


def effective_channels(bf: AnalogBeamformer, channels: ChannelRealization) -> np.ndarray:
    """All effective channels ``A h_{i,l}``; shape ``(..., N, L, N)``.

    Entry ``[i, l, n]`` is ``a_n^H h_{i,l,n}``.
    """
    blocks = channels.blocks
    if blocks.shape[-2:] != bf.phases.shape[-2:]:
        raise ValueError(
            f"beamformer shape {bf.phases.shape[-2:]} does not match channel blocks "
            f"{blocks.shape[-2:]}"
        )
    return np.einsum("...nm,...ilnm->...iln", bf.weights.conj(), blocks)


def effective_channel(
    bf: AnalogBeamformer, channels: ChannelRealization, device: tuple[int, int]
) -> np.ndarray:
    """Length-N effective channel of one device."""
    i, l = device
    blocks = channels.blocks[..., i, l, :, :]
    if blocks.shape[-2:] != bf.phases.shape[-2:]:
        raise ValueError("beamformer and channel dimensions differ")
    return np.einsum("...nm,...nm->...n", bf.weights.conj(), blocks)


def build_ro_digital(channels: ChannelRealization) -> np.ndarray:
    """RO combiners ``f_n = sum_l h_{n,l}``; shape ``(..., N, N_r)``."""
    return channels.h.sum(axis=-2)


def ro_effective_channels(f: np.ndarray, channels: ChannelRealization) -> np.ndarray:
    """``f_n^H h_{i,l}`` for all devices and tasks; shape ``(..., N, L, N)``."""
    h = channels.h
    *lead, n, l, n_r = h.shape
    flat = h.reshape(*lead, n * l, n_r)
    # (..., N_task, N_r) @ (..., N_r, K) -> (..., N_task, K)
    prod = np.matmul(f.conj(), np.swapaxes(flat, -1, -2))
    return np.swapaxes(prod, -1, -2).reshape(*lead, n, l, f.shape[-2])


def sinc(x):
    return np.sinc(x)  # numpy's sinc is the normalized sin(pi x)/(pi x)


def analog_gain(subarray_size: int, devices_per_cluster: int, bits: int | None = None) -> float:
    """Mean own-task effective channel, ``sqrt(pi M)/(2 sqrt(L))`` times ``sinc(2^-b)``."""
    gain = np.sqrt(np.pi * subarray_size) / (2 * np.sqrt(devices_per_cluster))
    if bits is not None:
        gain *= sinc(2.0**-bits)
    return float(gain)


def ro_gain(n_shifters: int) -> float:
    """Mean own-device RO coefficient ``E[f_n^H h_{n,l}] = E||h||^2 = N_r``."""
    return float(n_shifters)


@dataclass
class ScalingResult:
    zeta: float
    powers: np.ndarray  # (N, L)
    gain: float
    silent_tasks: tuple[int, ...] = ()


def scheme_gain(cfg: SystemConfig, mode: str | int | None = None) -> float:
    """Desired-signal gain of a receive scheme.

    ``mode`` is ``"ro"``, ``"continuous"``/``None`` or a bit count; the
    default ``mode`` falls back to ``cfg.quantization_bits``.
    """
    if mode == "ro":
        return ro_gain(cfg.n_shifters)
    if mode is None:
        bits = cfg.quantization_bits
    elif mode == "continuous":
        bits = None
    else:
        bits = int(mode)
    return analog_gain(cfg.subarray_size, cfg.devices_per_cluster, bits)


def compute_scaling_factor(
    alpha: np.ndarray, v: np.ndarray, cfg: SystemConfig, mode: str | int | None = None
) -> ScalingResult:
    """Shared scaling ``zeta`` and transmit powers matching every device's coefficient.

    Solves ``zeta * gain * sqrt(p_{n,l}) = alpha_{n,l} v_{n,l}`` with the
    largest power pinned at the budget.  Tasks whose devices all have
    ``v = 0`` stay silent and are reported in ``silent_tasks``.
    """
    alpha = np.asarray(alpha, dtype=float)
    v = np.asarray(v, dtype=float)
    if alpha.shape != v.shape or alpha.ndim != 2:
        raise ValueError("alpha and v must both have shape (N, L)")
    if np.any(v < 0) or np.any(alpha < 0):
        raise ValueError("alpha and v must be nonnegative")
    gain = scheme_gain(cfg, mode)
    coeff = alpha * v
    silent = tuple(int(n) for n in np.flatnonzero(~np.any(coeff > 0, axis=1)))
    peak = coeff.max()
    if peak <= 0:
        # nothing to send; keep zeta positive so the noise path stays defined
        return ScalingResult(1.0 / (gain * np.sqrt(cfg.power_budget)), np.zeros_like(coeff), gain, silent)
    zeta = peak / (gain * np.sqrt(cfg.power_budget))
    powers = cfg.power_budget * (coeff / peak) ** 2
    return ScalingResult(float(zeta), powers, gain, silent)


def realization_matched_amplitudes(
    own_effective: np.ndarray, alpha: np.ndarray, v: np.ndarray, zeta: float
) -> np.ndarray:
    """Genie complex transmit amplitudes with ``zeta b h_eff = alpha v`` per realization.

    Only meaningful as a test oracle: it inverts each device's own effective
    channel (phase included), which needs receive CSI at the devices and
    ignores the power budget.  Raises if an effective channel is exactly zero.
    """
    own = np.asarray(own_effective)
    target = np.asarray(alpha) * np.asarray(v)
    if np.any((own == 0) & (target > 0)):
        raise ValueError("own effective channel is zero; cannot match")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(target > 0, target / (zeta * own), 0.0)


def save_beamformer_csv(bf: AnalogBeamformer, path: str | Path) -> None:
    """Debug dump: one row per (subarray, element, phase)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subarray", "element", "phase"])
        for n, row in enumerate(np.asarray(bf.phases)):
            for m, phi in enumerate(row):
                writer.writerow([n, m, repr(float(phi))])
