"""Additive trend / seasonal / residual decomposition.

The trend is a tricube-weighted moving average; the seasonal component is a
sliding average over period-length blocks of the detrended series, padded at
both ends with copies of the edge blocks. All functions operate along the last
axis, so a (D, L) sample or a (B, D, L) batch decomposes channel by channel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d


@dataclass(frozen=True)
class DecompositionConfig:
    period: int = 24
    trend_window: int | None = None
    block_window: int = 3
    block_stride: int = 1

    def __post_init__(self):
        if self.period < 2:
            raise ValueError(f"period must be >= 2, got {self.period}")
        if self.block_window < 1 or self.block_stride < 1:
            raise ValueError("block_window and block_stride must be >= 1")
        if self.trend_window is not None and (self.trend_window < 1 or self.trend_window % 2 == 0):
            raise ValueError(f"trend_window must be a positive odd integer, got {self.trend_window}")

    @property
    def window(self) -> int:
        """Trend kernel length; defaults to the first odd integer >= period + 1."""
        if self.trend_window is not None:
            return self.trend_window
        w = self.period + 1
        return w if w % 2 else w + 1


@dataclass(frozen=True)
class Components:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"trend": self.trend, "seasonal": self.seasonal, "residual": self.residual}

    def reconstruct(self) -> np.ndarray:
        return self.trend + self.seasonal + self.residual


COMPONENT_NAMES = ("trend", "seasonal", "residual")


def tricube(x):
    x = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(x <= 1.0, (1.0 - x**3) ** 3, 0.0)


def trend_kernel(window: int) -> np.ndarray:
    half = (window - 1) // 2
    j = np.arange(-half, half + 1)
    k = tricube(j / (half + 1))
    return k / k.sum()


def extract_trend(series: np.ndarray, window: int) -> np.ndarray:
    """Tricube-weighted moving average; the kernel is renormalized where it overhangs an edge."""
    series = np.asarray(series, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"trend window must be a positive odd integer, got {window}")
    n = series.shape[-1]
    if window > 2 * n - 1:
        raise ValueError(f"trend window {window} too long for a series of length {n}")
    kernel = trend_kernel(window)
    weighted = correlate1d(series, kernel, axis=-1, mode="constant", cval=0.0)
    mass = correlate1d(np.ones(n), kernel, mode="constant", cval=0.0)
    return weighted / mass


def extract_seasonal(detrended: np.ndarray, config: DecompositionConfig, period: int | None = None) -> np.ndarray:
    """Sliding block average of a detrended series, tiled back to the input length."""
    x = np.asarray(detrended, dtype=np.float64)
    p = config.period if period is None else period
    l, m = config.block_window, config.block_stride
    n = x.shape[-1]
    if n < p:
        raise ValueError(f"series of length {n} shorter than the period {p}")
    n_blocks = -(-n // p)
    # (..., n_blocks, p) with NaN in the unused tail of a partial final block
    blocks = np.full(x.shape[:-1] + (n_blocks * p,), np.nan)
    blocks[..., :n] = x
    blocks = blocks.reshape(x.shape[:-1] + (n_blocks, p))

    pad = -(-(l - 1) // 2)
    idx = np.clip(np.arange(-pad, n_blocks + pad) , 0, n_blocks - 1)
    padded = blocks[..., idx, :]
    valid = ~np.isnan(padded)
    sums = np.where(valid, padded, 0.0).cumsum(axis=-2)
    counts = valid.cumsum(axis=-2)
    zero = np.zeros_like(sums[..., :1, :])
    sums = np.concatenate([zero, sums], axis=-2)
    counts = np.concatenate([zero.astype(counts.dtype), counts], axis=-2)

    # block i takes the window starting at padded block m * floor(i / m)
    starts = (np.arange(n_blocks) // m) * m
    window_sum = sums[..., starts + l, :] - sums[..., starts, :]
    window_count = counts[..., starts + l, :] - counts[..., starts, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        means = window_sum / window_count
    return means.reshape(x.shape[:-1] + (n_blocks * p,))[..., :n]


def decompose(values: np.ndarray, config: DecompositionConfig, periods: tuple[int, ...] | None = None) -> Components:
    """Split ``values`` along its last axis into trend + seasonal + residual.

    ``periods`` allows several seasonalities to be peeled off in turn; their
    sum is reported as the single seasonal component.
    """
    values = np.asarray(values, dtype=np.float64)
    trend = extract_trend(values, config.window)
    remainder = values - trend
    seasonal = np.zeros_like(values)
    for p in periods or (config.period,):
        s = extract_seasonal(remainder, config, period=p)
        seasonal = seasonal + s
        remainder = remainder - s
    residual = values - trend - seasonal
    return Components(trend, seasonal, residual)
