"""Dataset loading, splitting, windowing and reversible normalization.

A dataset is an (N variates x T steps) float matrix in time order. Splits are
contiguous, non-overlapping index ranges (train < val < test). Windows pair a
lookback slice x [N x L] with the adjacent horizon target y [N x S].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised for malformed input data or invalid split/window requests."""


INSTANCE_NORM_EPS = 1e-5

SplitBounds = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]

_SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Immutable multivariate series with optional split boundaries."""

    values: np.ndarray  # [N, T], float64, finite
    variate_names: list[str]
    frequency: str | None = None
    split_bounds: SplitBounds | None = None
    dates: pd.Series | None = field(default=None, repr=False, compare=False)

    @property
    def n_variates(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def split_range(self, split: str) -> tuple[int, int]:
        if self.split_bounds is None:
            raise DataError("dataset has no split bounds; call split_dataset first")
        try:
            return self.split_bounds[_SPLIT_NAMES.index(split)]
        except ValueError:
            raise DataError(f"unknown split {split!r}; expected one of {_SPLIT_NAMES}") from None

    def split_values(self, split: str) -> np.ndarray:
        lo, hi = self.split_range(split)
        return self.values[:, lo:hi]


@dataclass(frozen=True)
class Window:
    """One (lookback, horizon) training pair cut from the source series."""

    x: np.ndarray  # [N, L]
    y: np.ndarray  # [N, S]
    origin_t: int


@dataclass(frozen=True)
class NormStats:
    """Per-variate affine statistics for a reversible z-score."""

    mean: np.ndarray  # [N] or [B, N, 1]
    std: np.ndarray
    epsilon: float = INSTANCE_NORM_EPS

    def __post_init__(self) -> None:
        if np.any(np.asarray(self.std) + self.epsilon <= 0):
            raise DataError("std + epsilon must be positive elementwise")


def load_csv_dataset(path: str | Path, date_column: str | None = "date") -> TimeSeriesDataset:
    """Load a header-row CSV of real-valued variate columns (time in row order).

    ``date_column`` is parsed and kept as metadata only; pass ``None`` if the
    file has no date column. Any NaN/Inf or unparseable cell is a hard error
    naming the offending row and column.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    frame = pd.read_csv(path)
    if len(frame) < 2:
        raise DataError(f"{path}: need at least 2 rows, got {len(frame)}")

    dates = None
    if date_column is not None and date_column in frame.columns:
        dates = frame[date_column]
        frame = frame.drop(columns=[date_column])
    if frame.shape[1] == 0:
        raise DataError(f"{path}: no variate columns")

    for col in frame.columns:
        numeric = pd.to_numeric(frame[col], errors="coerce")
        bad = ~np.isfinite(numeric.to_numpy(dtype=np.float64, na_value=np.nan))
        if bad.any():
            row = int(np.argmax(bad))
            raise DataError(
                f"{path}: non-finite or unparseable value at row {row}, column {col!r}: "
                f"{frame[col].iloc[row]!r}"
            )
        frame[col] = numeric

    values = frame.to_numpy(dtype=np.float64).T.copy()  # column-major by variate
    values.setflags(write=False)
    return TimeSeriesDataset(
        values=values,
        variate_names=[str(c) for c in frame.columns],
        dates=dates,
    )


def _check_bounds(bounds: SplitBounds, n_steps: int) -> None:
    prev_end = None
    for name, (lo, hi) in zip(_SPLIT_NAMES, bounds):
        if not (0 <= lo < hi <= n_steps):
            raise DataError(f"{name} split [{lo}, {hi}) is empty or outside [0, {n_steps})")
        if prev_end is not None and lo < prev_end:
            raise DataError(f"{name} split [{lo}, {hi}) overlaps the previous split")
        prev_end = hi


def split_dataset(
    ds: TimeSeriesDataset,
    ratio: tuple[float, float] | None = None,
    explicit: Sequence[int] | None = None,
) -> TimeSeriesDataset:
    """Attach train/val/test bounds, by (train, val) ratios or explicit indices.

    Ratio mode floors to integer boundaries and assigns the remainder to test.
    Explicit mode takes four increasing boundaries ``(t0, t1, t2, t3)`` giving
    train [t0, t1), val [t1, t2), test [t2, t3).
    """
    if (ratio is None) == (explicit is None):
        raise DataError("specify exactly one of ratio= or explicit=")
    T = ds.n_steps
    if ratio is not None:
        r_train, r_val = ratio
        if not (0 < r_train < 1 and 0 < r_val < 1 and r_train + r_val < 1):
            raise DataError(f"ratios must lie in (0,1) and sum below 1, got {ratio}")
        t1 = int(T * r_train)
        t2 = t1 + int(T * r_val)
        bounds: SplitBounds = ((0, t1), (t1, t2), (t2, T))
    else:
        if len(explicit) != 4:
            raise DataError(f"explicit bounds need 4 indices, got {len(explicit)}")
        t0, t1, t2, t3 = (int(b) for b in explicit)
        bounds = ((t0, t1), (t1, t2), (t2, t3))
    _check_bounds(bounds, T)
    return replace(ds, split_bounds=bounds)


class Windows(Sequence[Window]):
    """Lazy view over all (x, y) windows of one split.

    Window i starts at ``start + i * stride``; slices are materialized on
    access so large splits never get copied wholesale. ``gather`` builds
    batched arrays for a set of window indices.
    """

    def __init__(self, values: np.ndarray, start: int, count: int, lookback: int, horizon: int, stride: int):
        self._values = values
        self._start = start
        self._count = count
        self.lookback = lookback
        self.horizon = horizon
        self.stride = stride

    def __len__(self) -> int:
        return self._count

    def origin(self, i: int) -> int:
        if not 0 <= i < self._count:
            raise IndexError(i)
        return self._start + i * self.stride

    def __getitem__(self, i: int) -> Window:
        t = self.origin(i)
        L, S = self.lookback, self.horizon
        return Window(x=self._values[:, t : t + L], y=self._values[:, t + L : t + L + S], origin_t=t)

    def __iter__(self) -> Iterator[Window]:
        for i in range(self._count):
            yield self[i]

    def gather(self, idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Stack windows ``idx`` into (x [B,N,L], y [B,N,S])."""
        xs = np.stack([self[int(i)].x for i in idx])
        ys = np.stack([self[int(i)].y for i in idx])
        return xs, ys


def make_windows(
    ds: TimeSeriesDataset,
    split: str,
    lookback: int,
    horizon: int,
    stride: int = 1,
) -> Windows:
    """Enumerate every stride-th window fitting entirely inside one split."""
    lo, hi = ds.split_range(split)
    split_len = hi - lo
    if lookback + horizon > split_len:
        raise DataError(
            f"lookback {lookback} + horizon {horizon} exceeds {split} split length {split_len}"
        )
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    count = (split_len - lookback - horizon) // stride + 1
    return Windows(ds.values, lo, count, lookback, horizon, stride)


def instance_normalize(x: np.ndarray, epsilon: float = INSTANCE_NORM_EPS) -> tuple[np.ndarray, NormStats]:
    """Per-variate z-score over the trailing (time) axis, population std.

    Works on [N, L] or batched [B, N, L] input; constant rows map to ~0 via the
    epsilon in the denominator.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    stats = NormStats(mean=mean, std=std, epsilon=epsilon)
    return (x - mean) / (std + epsilon), stats


def denormalize(y: np.ndarray, stats: NormStats) -> np.ndarray:
    """Invert :func:`instance_normalize` on any slice with the same leading dims."""
    return np.asarray(y) * (stats.std + stats.epsilon) + stats.mean


def standardize_dataset(ds: TimeSeriesDataset) -> tuple[TimeSeriesDataset, NormStats]:
    """Dataset-level z-score using train-split statistics (benchmark scale).

    Zero-variance train variates keep scale 1 so the transform stays invertible.
    """
    train = ds.split_values("train")
    mean = train.mean(axis=1, keepdims=True)
    std = train.std(axis=1, keepdims=True)
    std = np.where(std == 0.0, 1.0, std)
    values = (ds.values - mean) / std
    values.setflags(write=False)
    return replace(ds, values=values), NormStats(mean=mean, std=std, epsilon=0.0)
