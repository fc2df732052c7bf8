import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mtairfl.system import (
    ChannelRealization,
    ConfigError,
    RandomStream,
    SystemConfig,
    complex_normal,
    config_from_mapping,
    load_config_file,
    sample_channel_batch,
    sample_channels,
    sample_noise,
    subarray_block,
)


def test_defaults_and_derived_sizes():
    cfg = SystemConfig(n_tasks=4, devices_per_cluster=25, n_shifters=256)
    assert cfg.n_rf_chains == 4
    assert cfg.subarray_size == 64
    assert cfg.n_devices == 100
    assert cfg.snr_db == 0.0


@pytest.mark.parametrize("kwargs", [
    dict(n_tasks=3, n_shifters=64),
    dict(n_tasks=0),
    dict(devices_per_cluster=0),
    dict(quantization_bits=0),
    dict(power_budget=0.0),
    dict(noise_variance=-1.0),
    dict(model_dim=0),
])
def test_invalid_config_rejected(kwargs):
    with pytest.raises(ConfigError):
        SystemConfig(**kwargs)


@given(n=st.integers(1, 8), m=st.integers(1, 16), extra=st.integers(1, 7))
def test_divisibility_rule(n, m, extra):
    assert SystemConfig(n_tasks=n, n_shifters=n * m).subarray_size == m
    if extra % n:
        with pytest.raises(ConfigError):
            SystemConfig(n_tasks=n, n_shifters=n * m + extra)


def test_config_mapping_snr_and_bits():
    cfg = config_from_mapping({"snr_db": 10, "quantization_bits": "continuous", "seed": 7,
                               "n_tasks": 2, "n_shifters": 8, "unrelated": 1})
    assert cfg.noise_variance == 1.0
    assert cfg.power_budget == pytest.approx(10.0)
    assert cfg.quantization_bits is None
    assert cfg.rng_seed == 7
    with pytest.raises(ConfigError):
        config_from_mapping({"n_tasks": 2.5})


def test_load_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("n_tasks: 2\nn_shifters: 16\nquantization_bits: 3\n")
    assert config_from_mapping(load_config_file(p)).quantization_bits == 3
    p.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config_file(p)
    p.write_text("a: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config_file(p)
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "missing.yaml")


def test_scalar_channel_moments():
    cfg = SystemConfig(n_tasks=1, devices_per_cluster=1, n_shifters=1)
    h = sample_channel_batch(cfg, np.random.default_rng(1), 200_000).h.ravel()
    se = 1 / math.sqrt(h.size)
    assert abs(h.mean().real) < 4 * se * math.sqrt(0.5)
    assert abs(h.mean().imag) < 4 * se * math.sqrt(0.5)
    power = np.abs(h) ** 2
    assert abs(power.mean() - 1) < 3 * power.std() / math.sqrt(h.size)


def test_channel_shapes_and_blocks():
    cfg = SystemConfig(n_tasks=2, devices_per_cluster=3, n_shifters=8)
    ch = sample_channels(cfg, RandomStream(0))
    assert ch.h.shape == (2, 3, 8)
    assert ch.blocks.shape == (2, 3, 2, 4)
    np.testing.assert_array_equal(ch.blocks[1, 2, 1], ch.h[1, 2, 4:])


def test_magnitude_mean():
    # E|h| for CN(0, 1) is sqrt(pi)/2
    h = complex_normal(np.random.default_rng(2), 1_000_000)
    assert abs(np.abs(h).mean() - math.sqrt(math.pi) / 2) < 0.002


def test_phase_is_uniform():
    h = complex_normal(np.random.default_rng(3), 100_000)
    phase = np.mod(np.angle(h), 2 * np.pi)
    res = stats.kstest(phase, stats.uniform(loc=0, scale=2 * np.pi).cdf)
    assert res.statistic < 1.628 / math.sqrt(phase.size)  # 1% critical value


def test_noise_zero_and_unit_variance():
    cfg = SystemConfig(n_tasks=1, n_shifters=1000, model_dim=1000, noise_variance=0.0)
    assert not np.any(sample_noise(cfg, RandomStream(0)))
    w = sample_noise(cfg.replace(noise_variance=1.0), RandomStream(0))
    assert abs(np.mean(np.abs(w) ** 2) - 1) < 0.005
    w4 = sample_noise(cfg.replace(noise_variance=4.0), RandomStream(0))
    np.testing.assert_allclose(w4, 2 * w)


def test_noise_channel_independent():
    cfg = SystemConfig(n_tasks=1, devices_per_cluster=1, n_shifters=100_000, model_dim=1)
    stream = RandomStream(5)
    h = sample_channels(cfg, stream).h.ravel()
    w = sample_noise(cfg, stream).ravel()
    assert abs(np.corrcoef(h.real, w.real)[0, 1]) < 0.01
    assert abs(np.corrcoef(h.imag, w.imag)[0, 1]) < 0.01


def test_reproducible_and_stable_substreams():
    cfg = SystemConfig(n_tasks=2, devices_per_cluster=3, n_shifters=8, model_dim=4)
    a = sample_channels(cfg, RandomStream(11), round_index=2)
    b = sample_channels(cfg, RandomStream(11), round_index=2)
    np.testing.assert_array_equal(a.h, b.h)
    # a different model size must not perturb channel draws
    c = sample_channels(cfg.replace(model_dim=99), RandomStream(11), round_index=2)
    np.testing.assert_array_equal(a.h, c.h)
    d = sample_channels(cfg, RandomStream(11), round_index=3)
    assert not np.allclose(a.h, d.h)
    np.testing.assert_array_equal(sample_noise(cfg, RandomStream(4), 1), sample_noise(cfg, RandomStream(4), 1))


def test_subarray_block_slicing():
    h = np.array([1, 2, 3, 4], dtype=complex).reshape(1, 1, 4)
    ch = ChannelRealization(h=h, n_tasks=2)
    np.testing.assert_array_equal(subarray_block(ch, (0, 0), 1), [3, 4])
    whole = ChannelRealization(h=h, n_tasks=1)
    np.testing.assert_array_equal(subarray_block(whole, (0, 0), 0), h[0, 0])
    with pytest.raises(IndexError):
        subarray_block(ch, (0, 0), 2)
    with pytest.raises(IndexError):
        subarray_block(ch, (1, 0), 0)


@settings(max_examples=25)
@given(n=st.integers(1, 4), l=st.integers(1, 3), m=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_blocks_concatenate_to_channel(n, l, m, seed):
    cfg = SystemConfig(n_tasks=n, devices_per_cluster=l, n_shifters=n * m)
    ch = sample_channels(cfg, RandomStream(seed))
    for i in range(n):
        for j in range(l):
            joined = np.concatenate([subarray_block(ch, (i, j), k) for k in range(n)])
            np.testing.assert_array_equal(joined, ch.h[i, j])


def test_path_loss_scales_power():
    cfg = SystemConfig(n_tasks=1, devices_per_cluster=1, n_shifters=4, path_loss=0.25)
    a = sample_channels(cfg, RandomStream(0)).h
    b = sample_channels(cfg.replace(path_loss=1.0), RandomStream(0)).h
    np.testing.assert_allclose(a, 0.5 * b)
