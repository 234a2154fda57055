import numpy as np
import pytest

from core import TimeSeries


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_regime_series(seed: int, n_each: int = 500, nc: int = 1) -> np.ndarray:
    """A slow sine regime followed by a fast sawtooth regime, light noise on top"""
    gen = np.random.default_rng(seed)
    t = np.arange(n_each)
    first = np.sin(2 * np.pi * t / 40.0)
    second = 2.0 * ((t % 13) / 13.0) - 1.0
    base = np.concatenate([first, second])
    channels = [base + 0.05 * gen.standard_normal(2 * n_each) for _ in range(nc)]
    return np.vstack(channels)


@pytest.fixture
def two_regimes():
    """Single-channel two-regime TimeSeries with its boundary"""
    return TimeSeries(two_regime_series(7)), 500


@pytest.fixture
def sinusoid_windows():
    """Windows cut from a noisy sinusoid, the training fixture for the autoencoder"""
    gen = np.random.default_rng(3)
    t = np.arange(2000)
    x = np.sin(2 * np.pi * t / 32.0) + 0.05 * gen.standard_normal(len(t))
    return TimeSeries(x)
