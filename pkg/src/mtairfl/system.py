"""System configuration, random streams and channel/noise generation.

All randomness flows from a single master seed.  Independent substreams are
derived with :class:`numpy.random.SeedSequence` spawn keys, so a draw for a
given (round, device) never depends on how many other devices or how large
the model is.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    """Raised for an inconsistent or unreadable configuration."""


# spawn-key tags; values are part of the reproducibility contract
_TAG_CHANNEL = 0
_TAG_NOISE = 1
_TAG_BATCH = 2
_TAG_DATA = 3


@dataclass(frozen=True)
class SystemConfig:
    """Experiment configuration.

    ``quantization_bits`` is ``None`` for continuous phase shifters.  One RF
    chain serves each task, so ``n_shifters`` must split evenly into
    ``n_tasks`` subarrays.
    """

    n_tasks: int = 2
    devices_per_cluster: int = 10
    n_shifters: int = 64
    quantization_bits: int | None = None
    power_budget: float = 1.0
    noise_variance: float = 1.0
    model_dim: int = 16
    rng_seed: int = 0
    path_loss: float = 1.0

    def __post_init__(self) -> None:
        for name in ("n_tasks", "devices_per_cluster", "n_shifters", "model_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.n_shifters % self.n_tasks:
            raise ConfigError(
                f"n_shifters={self.n_shifters} is not divisible by n_tasks={self.n_tasks}"
            )
        bits = self.quantization_bits
        if bits is not None and (not isinstance(bits, (int, np.integer)) or bits < 1):
            raise ConfigError(f"quantization_bits must be >= 1 or None, got {bits!r}")
        if not self.power_budget > 0:
            raise ConfigError("power_budget must be > 0")
        if not self.noise_variance >= 0:
            raise ConfigError("noise_variance must be >= 0")
        if not self.path_loss > 0:
            raise ConfigError("path_loss must be > 0")

    @property
    def n_rf_chains(self) -> int:
        return self.n_tasks

    @property
    def subarray_size(self) -> int:
        return self.n_shifters // self.n_tasks

    @property
    def n_devices(self) -> int:
        return self.n_tasks * self.devices_per_cluster

    @property
    def snr_db(self) -> float:
        if self.noise_variance == 0:
            return float("inf")
        return float(10 * np.log10(self.power_budget / self.noise_variance))

    def replace(self, **changes: Any) -> "SystemConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def config_from_mapping(raw: dict[str, Any]) -> SystemConfig:
    """Build a :class:`SystemConfig` from config-file keys.

    Accepts the file keys ``snr_db`` and ``seed`` (noise variance is pinned
    to 1, so power budget = 10**(snr_db/10)).  Unknown keys are ignored so
    experiment plans can share the same file.
    """
    kwargs: dict[str, Any] = {}
    for key in ("n_tasks", "devices_per_cluster", "n_shifters", "model_dim"):
        if key in raw:
            kwargs[key] = _as_int(raw[key], key)
    if "quantization_bits" in raw:
        bits = raw["quantization_bits"]
        if bits is None or (isinstance(bits, str) and bits.strip().lower() == "continuous"):
            kwargs["quantization_bits"] = None
        else:
            kwargs["quantization_bits"] = _as_int(bits, "quantization_bits")
    if "snr_db" in raw:
        kwargs["noise_variance"] = 1.0
        kwargs["power_budget"] = float(10 ** (float(raw["snr_db"]) / 10))
    else:
        if "power_budget" in raw:
            kwargs["power_budget"] = float(raw["power_budget"])
        if "noise_variance" in raw:
            kwargs["noise_variance"] = float(raw["noise_variance"])
    if "path_loss" in raw:
        kwargs["path_loss"] = float(raw["path_loss"])
    seed = raw.get("seed", raw.get("rng_seed"))
    if seed is not None:
        kwargs["rng_seed"] = _as_int(seed, "seed")
    return SystemConfig(**kwargs)


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a YAML (or JSON) key-value config file into a dict."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a key-value mapping")
    return raw


def _as_int(value: Any, key: str) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"{key} must be an integer")
    try:
        out = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be an integer, got {value!r}") from exc
    if out != value and not isinstance(value, str):
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    return out


class RandomStream:
    """Master seed plus deterministic derivation of independent substreams."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def channel(self, round_index: int, device: int) -> np.random.Generator:
        return self._rng(_TAG_CHANNEL, round_index, device)

    def noise(self, round_index: int) -> np.random.Generator:
        return self._rng(_TAG_NOISE, round_index)

    def batch(self, experiment: int, chunk: int) -> np.random.Generator:
        """Stream for Monte Carlo chunk ``chunk`` of experiment ``experiment``."""
        return self._rng(_TAG_BATCH, experiment, chunk)

    def data(self, *key: int) -> np.random.Generator:
        return self._rng(_TAG_DATA, *key)


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian, E|x|^2 = variance."""
    shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
    pairs = rng.standard_normal(shape + (2,))
    out = pairs.view(np.complex128)[..., 0]
    out *= np.sqrt(variance / 2)
    return out


@dataclass
class ChannelRealization:
    """Channels of every device for one round.

    ``h`` has shape ``(n_tasks, devices_per_cluster, n_shifters)``; device
    ``(i, l)`` is ``h[i, l]``.  Leading batch axes are allowed for Monte
    Carlo use (shape ``(..., N, L, N_r)``).
    """

    h: np.ndarray
    n_tasks: int
    round_index: int = 0

    @property
    def subarray_size(self) -> int:
        return self.h.shape[-1] // self.n_tasks

    @property
    def blocks(self) -> np.ndarray:
        """View with shape ``(..., N, L, N, M)``: cluster, device, subarray, element."""
        *lead, n, l, n_r = self.h.shape
        return self.h.reshape(*lead, n, l, self.n_tasks, n_r // self.n_tasks)


def sample_channels(
    cfg: SystemConfig, stream: RandomStream, round_index: int = 0
) -> ChannelRealization:
    """Draw h_{i,l} ~ CN(0, I) for every device, one substream per device."""
    n, l, n_r = cfg.n_tasks, cfg.devices_per_cluster, cfg.n_shifters
    h = np.empty((n, l, n_r), dtype=complex)
    for i in range(n):
        for j in range(l):
            h[i, j] = complex_normal(stream.channel(round_index, i * l + j), (n_r,))
    if cfg.path_loss != 1.0:
        h *= np.sqrt(cfg.path_loss)
    return ChannelRealization(h=h, n_tasks=n, round_index=round_index)


def sample_channel_batch(cfg: SystemConfig, rng: np.random.Generator, n_trials: int) -> ChannelRealization:
    """``n_trials`` independent realizations stacked on a leading axis."""
    shape = (n_trials, cfg.n_tasks, cfg.devices_per_cluster, cfg.n_shifters)
    h = complex_normal(rng, shape)
    if cfg.path_loss != 1.0:
        h *= np.sqrt(cfg.path_loss)
    return ChannelRealization(h=h, n_tasks=cfg.n_tasks)


def sample_noise(cfg: SystemConfig, stream: RandomStream, round_index: int = 0) -> np.ndarray:
    """Receiver noise, shape ``(n_shifters, model_dim)``, per-entry variance sigma^2."""
    shape = (cfg.n_shifters, cfg.model_dim)
    if cfg.noise_variance == 0:
        return np.zeros(shape, dtype=complex)
    return complex_normal(stream.noise(round_index), shape, cfg.noise_variance)


def subarray_block(channels: ChannelRealization, device: tuple[int, int], subarray: int) -> np.ndarray:
    """Block ``h_{i,l,n}`` of device ``(i, l)`` seen by subarray ``n`` (length M)."""
    i, l = device
    n_tasks, n_dev = channels.h.shape[-3], channels.h.shape[-2]
    if not (0 <= i < n_tasks and 0 <= l < n_dev and 0 <= subarray < channels.n_tasks):
        raise IndexError(f"device {device} / subarray {subarray} out of range")
    return channels.blocks[..., i, l, subarray, :]
