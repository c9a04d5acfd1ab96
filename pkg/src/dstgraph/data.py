"""Ingestion, imputation, standardization, calendar features and windowing."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised when a table violates an ingestion or windowing contract."""


@dataclass(frozen=True)
class TableSchema:
    timestamp_column: str = "date"
    channels: tuple[str, ...] | None = None
    resolution: str | None = None
    delimiter: str = ","
    timestamp_format: str | None = "%Y-%m-%d %H:%M:%S"


@dataclass(frozen=True)
class TimeSeriesTable:
    timestamps: pd.DatetimeIndex
    values: np.ndarray  # (T, D), NaN marks a missing observation
    channel_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        if values.shape != (len(self.timestamps), len(self.channel_names)):
            raise DataError(
                f"values shape {values.shape} does not match "
                f"{len(self.timestamps)} timestamps x {len(self.channel_names)} channels"
            )
        object.__setattr__(self, "values", values)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())

    def rows(self, start: int, stop: int) -> TimeSeriesTable:
        return TimeSeriesTable(self.timestamps[start:stop], self.values[start:stop], self.channel_names)

    def select(self, channels: Sequence[int]) -> TimeSeriesTable:
        channels = list(channels)
        return TimeSeriesTable(
            self.timestamps,
            self.values[:, channels],
            tuple(self.channel_names[c] for c in channels),
        )

    def to_csv(self, path, float_format: str = "%.17g") -> None:
        frame = pd.DataFrame(self.values, columns=list(self.channel_names))
        frame.insert(0, "date", self.timestamps.strftime("%Y-%m-%d %H:%M:%S"))
        frame.to_csv(path, index=False, float_format=float_format)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> NormalizationStats:
        """Population mean/std per channel; zero-variance channels are rejected."""
        values = np.asarray(values, dtype=np.float64)
        if np.isnan(values).any():
            raise DataError("cannot fit normalization stats on a table with missing values")
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        flat = np.flatnonzero(~(std > 0))
        if flat.size:
            raise DataError(f"channels with zero variance: {flat.tolist()}")
        return cls(mean, std)


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be nonnegative and sum to 1, got {fractions}")

    def boundaries(self, n_steps: int) -> dict[str, tuple[int, int]]:
        """Contiguous [start, stop) row ranges for train/val/test."""
        n_train = int(round(n_steps * self.train_fraction))
        n_val = int(round(n_steps * self.val_fraction))
        return {
            "train": (0, n_train),
            "val": (n_train, n_train + n_val),
            "test": (n_train + n_val, n_steps),
        }


def load_table(path, schema: TableSchema = TableSchema()) -> TimeSeriesTable:
    """Read a delimited table and complete its timestamp grid with NaN rows."""
    frame = pd.read_csv(path, sep=schema.delimiter)
    if schema.timestamp_column not in frame.columns:
        raise DataError(f"timestamp column {schema.timestamp_column!r} not found")
    try:
        stamps = pd.to_datetime(frame[schema.timestamp_column], format=schema.timestamp_format)
    except (ValueError, TypeError) as exc:
        raise DataError(f"unparseable timestamp: {exc}") from None
    channels = schema.channels
    if channels is None:
        channels = tuple(c for c in frame.columns if c != schema.timestamp_column)
    if not channels:
        raise DataError("table has zero channels")
    missing = [c for c in channels if c not in frame.columns]
    if missing:
        raise DataError(f"channels not found: {missing}")
    values = frame[list(channels)].apply(pd.to_numeric, errors="coerce").to_numpy(np.float64)

    index = pd.DatetimeIndex(stamps)
    if index.has_duplicates:
        raise DataError(f"duplicate timestamps: {index[index.duplicated()][:3].tolist()}")
    order = np.argsort(index.asi8, kind="stable")
    index, values = index[order], values[order]

    if len(index) > 1:
        step = pd.Timedelta(schema.resolution) if schema.resolution else pd.Series(index).diff().min()
        offsets = (index - index[0]) / step
        if not np.allclose(offsets, np.round(offsets)):
            raise DataError(f"non-constant resolution: timestamps are not on a {step} grid")
        grid = pd.date_range(index[0], index[-1], freq=step)
        full = np.full((len(grid), len(channels)), np.nan)
        full[np.round(offsets).astype(np.int64)] = values
        index, values = grid, full
    return TimeSeriesTable(index, values, tuple(channels))


def impute_missing(table: TimeSeriesTable) -> TimeSeriesTable:
    """Fill gaps with the mean of observed values sharing (month, weekday, hour).

    Buckets with no observed peer fall back to the channel-wide mean.
    """
    if not table.has_missing():
        return table
    ts = table.timestamps
    bucket = pd.MultiIndex.from_arrays([ts.month, ts.dayofweek, ts.hour])
    codes = pd.factorize(bucket)[0]
    values = table.values.copy()
    for c in range(table.n_channels):
        col = values[:, c]
        gaps = np.isnan(col)
        if not gaps.any():
            continue
        observed = ~gaps
        if not observed.any():
            raise DataError(f"channel {table.channel_names[c]!r} has no observed values")
        sums = np.bincount(codes[observed], weights=col[observed], minlength=codes.max() + 1)
        counts = np.bincount(codes[observed], minlength=codes.max() + 1)
        fill = np.full(sums.shape, col[observed].mean())
        has = counts > 0
        fill[has] = sums[has] / counts[has]
        col[gaps] = fill[codes[gaps]]
    return TimeSeriesTable(table.timestamps, values, table.channel_names)


def _check_stats(table: TimeSeriesTable, stats: NormalizationStats) -> None:
    if stats.mean.shape != (table.n_channels,) or stats.std.shape != (table.n_channels,):
        raise DataError(
            f"stats for {stats.mean.shape[0]} channels applied to a {table.n_channels}-channel table"
        )


def standardize(table: TimeSeriesTable, stats: NormalizationStats) -> TimeSeriesTable:
    _check_stats(table, stats)
    return TimeSeriesTable(table.timestamps, (table.values - stats.mean) / stats.std, table.channel_names)


def destandardize(table: TimeSeriesTable, stats: NormalizationStats) -> TimeSeriesTable:
    _check_stats(table, stats)
    return TimeSeriesTable(table.timestamps, table.values * stats.std + stats.mean, table.channel_names)


N_TIME_FEATURES = 4


def make_time_features(timestamps) -> np.ndarray:
    """Calendar features scaled to [-0.5, 0.5]: hour, weekday, day of month, month."""
    ts = pd.DatetimeIndex(timestamps)
    return np.stack([
        ts.hour / 23.0 - 0.5,
        ts.dayofweek / 6.0 - 0.5,
        (ts.day - 1) / 30.0 - 0.5,
        (ts.month - 1) / 11.0 - 0.5,
    ]).astype(np.float64)


@dataclass(frozen=True)
class WindowSample:
    lookback: np.ndarray  # (D, L)
    target: np.ndarray  # (D, H)
    time_features: np.ndarray  # (F, L)
    target_time_features: np.ndarray  # (F, H)
    t_end: int


@dataclass
class WindowSet(Sequence):
    """Lazily-sliced windows over a table.

    ``t_end`` values are absolute row indices into the table the set was cut
    from, so samples can be traced back for leakage checks.
    """

    values: np.ndarray  # (T, D) full table values
    time_features: np.ndarray  # (F, T)
    lookback: int
    horizon: int
    t_ends: np.ndarray
    _series: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._series = np.ascontiguousarray(self.values.T)

    def __len__(self) -> int:
        return len(self.t_ends)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        t = int(self.t_ends[i])
        lo, hi = t - self.lookback + 1, t + 1
        return WindowSample(
            lookback=self._series[:, lo:hi].copy(),
            target=self._series[:, hi:hi + self.horizon].copy(),
            time_features=self.time_features[:, lo:hi].copy(),
            target_time_features=self.time_features[:, hi:hi + self.horizon].copy(),
            t_end=t,
        )

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (lookback, target, time_features) arrays for the given sample indices."""
        t = self.t_ends[np.asarray(indices, dtype=np.int64)]
        back = t[:, None] + np.arange(-self.lookback + 1, 1)
        ahead = t[:, None] + np.arange(1, self.horizon + 1)
        x = self._series[:, back].transpose(1, 0, 2)
        y = self._series[:, ahead].transpose(1, 0, 2)
        tf = self.time_features[:, back].transpose(1, 0, 2)
        return x, y, tf

    def select_channels(self, channels: Sequence[int]) -> WindowSet:
        return WindowSet(self.values[:, list(channels)], self.time_features, self.lookback, self.horizon, self.t_ends)


def count_windows(n_steps: int, lookback: int, horizon: int, stride: int = 1) -> int:
    return (n_steps - lookback - horizon) // stride + 1


def window_samples(
    table: TimeSeriesTable,
    lookback: int,
    horizon: int,
    stride: int = 1,
    start: int = 0,
    stop: int | None = None,
) -> WindowSet:
    """Every stride-spaced window with a full look-back and full horizon.

    With ``start``/``stop`` the horizons are confined to rows ``[start, stop)``
    while look-backs may reach up to ``lookback`` rows before ``start``.
    """
    if lookback < 1 or horizon < 1 or stride < 1:
        raise DataError("lookback, horizon and stride must be positive")
    stop = table.n_steps if stop is None else stop
    first_end = max(start - 1, lookback - 1)
    last_end = stop - horizon - 1
    if last_end < first_end:
        raise DataError(
            f"not enough rows for a window: need lookback + horizon = {lookback + horizon}, "
            f"have {stop - max(start - lookback, 0)}"
        )
    t_ends = np.arange(first_end, last_end + 1, stride, dtype=np.int64)
    return WindowSet(table.values, make_time_features(table.timestamps), lookback, horizon, t_ends)


@dataclass(frozen=True)
class PreparedData:
    table: TimeSeriesTable  # standardized, imputed
    stats: NormalizationStats
    boundaries: dict[str, tuple[int, int]]


def prepare(table: TimeSeriesTable, split: SplitConfig = SplitConfig()) -> PreparedData:
    """Impute, split chronologically and standardize with training-split statistics."""
    table = impute_missing(table)
    bounds = split.boundaries(table.n_steps)
    lo, hi = bounds["train"]
    stats = NormalizationStats.fit(table.values[lo:hi])
    return PreparedData(standardize(table, stats), stats, bounds)


def split_windows(data: PreparedData, lookback: int, horizon: int, stride: int = 1) -> dict[str, WindowSet]:
    return {
        name: window_samples(data.table, lookback, horizon, stride, start=lo, stop=hi)
        for name, (lo, hi) in data.boundaries.items()
    }


def synthetic_table(
    n_steps: int = 5000,
    noise: float = 0.1,
    seed: int = 0,
    start: str = "2020-01-01 00:00:00",
) -> TimeSeriesTable:
    """Two coupled hourly sinusoid channels with Gaussian noise.

    Channel 0 mixes a daily and a weekly cycle; channel 1 follows channel 0
    with a six-step lag plus its own half-day cycle.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_steps + 6, dtype=np.float64)
    base = np.sin(2 * np.pi * t / 24) + 0.5 * np.sin(2 * np.pi * t / 168)
    lead = base[6:]
    follow = 0.8 * base[:-6] + 0.3 * np.sin(2 * np.pi * t[6:] / 12)
    values = np.stack([lead, follow], axis=1) + noise * rng.standard_normal((n_steps, 2))
    stamps = pd.date_range(start, periods=n_steps, freq="h")
    return TimeSeriesTable(stamps, values, ("lead", "follow"))
