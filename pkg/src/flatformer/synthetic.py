"""Synthetic datasets with planted dependency structure, for tests and demos."""

from __future__ import annotations

import numpy as np

from .data import TimeSeriesDataset


def smooth_noise(n_steps: int, rng: np.random.Generator, smooth: int = 3) -> np.ndarray:
    """Unit-variance Gaussian noise with a short correlation length.

    Its own future is unpredictable beyond a few steps, which is what makes
    the delayed-copy task below require a cross-variate read.
    """
    pad = 4 * smooth
    white = rng.normal(size=n_steps + 2 * pad)
    kernel = np.exp(-0.5 * (np.arange(-pad, pad + 1) / smooth) ** 2)
    kernel /= kernel.sum()
    out = np.convolve(white, kernel, mode="same")[pad : pad + n_steps]
    out -= out.mean()
    out /= out.std()
    return out


def delayed_copy_dataset(
    n_steps: int,
    patch_len: int = 8,
    delay_patches: int = 2,
    noise_std: float = 0.05,
    n_variates: int = 4,
    source: int = 0,
    target: int = 2,
    seed: int = 0,
    smooth: int = 3,
) -> TimeSeriesDataset:
    """Series where one variate repeats another after a fixed patch delay.

    ``target`` equals ``source`` delayed by ``delay_patches * patch_len``
    steps plus independent N(0, noise_std^2) noise; every other variate is
    independent smooth noise. Forecasting the target at horizons up to the
    delay therefore amounts to reading the source's observed lookback, a
    dependency that only crosses variate AND time.
    """
    if source == target:
        raise ValueError("source and target must differ")
    if not (0 <= source < n_variates and 0 <= target < n_variates):
        raise ValueError("source/target outside variate range")
    rng = np.random.default_rng(seed)
    delay = delay_patches * patch_len
    values = np.zeros((n_variates, n_steps))
    source_series = smooth_noise(n_steps + delay, rng, smooth)
    values[source] = source_series[delay:]
    for i in range(n_variates):
        if i not in (source, target):
            values[i] = smooth_noise(n_steps, rng, smooth)
    values[target] = source_series[:n_steps] + noise_std * rng.normal(size=n_steps)
    return TimeSeriesDataset(
        values=values,
        variate_names=[f"v{i}" for i in range(n_variates)],
        frequency=None,
    )
