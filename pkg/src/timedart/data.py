"""Loading, splitting, windowing and instance normalization of multivariate series.

Arrays are laid out channels-first: a series is ``[C, T]`` and a window
lookback is ``[C, L]``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

STD_FLOOR = 1e-5


class DataError(ValueError):
    """Raised for malformed series files or impossible split/window requests."""


@dataclass
class MultivariateSeries:
    values: np.ndarray
    channel_names: list[str] = field(default_factory=list)
    frequency_hint: Optional[str] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[None, :]
        if self.values.ndim != 2:
            raise DataError(f"series must be 2-D [C, T], got shape {self.values.shape}")
        C, T = self.values.shape
        if C < 1 or T < 1:
            raise DataError(f"series must have at least one channel and one step, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            c, t = np.argwhere(~np.isfinite(self.values))[0]
            raise DataError(f"non-finite value at channel {c}, step {t}")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(C)]
        if len(self.channel_names) != C:
            raise DataError(f"{len(self.channel_names)} channel names for {C} channels")

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "MultivariateSeries":
        return MultivariateSeries(self.values[:, start:stop].copy(), list(self.channel_names), self.frequency_hint)


@dataclass
class SplitSpec:
    """Either chronological fractions or explicit ``(start, stop)`` row ranges.

    ``context`` prepends that many rows from the preceding split to val/test,
    which lets the first val/test window use history from the previous split
    (the usual ETT convention). The default of 0 keeps splits disjoint.
    """

    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    boundaries: Optional[Sequence[tuple[int, int]]] = None
    context: int = 0


@dataclass
class Window:
    lookback: np.ndarray
    horizon: Optional[np.ndarray] = None
    label: Optional[int] = None
    start: int = 0


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def _parse_float(text: str) -> Optional[float]:
    try:
        return float(text)
    except ValueError:
        return None


def load_csv(
    path: Union[str, Path],
    columns: Optional[Sequence[Union[str, int]]] = None,
    header: bool = True,
) -> MultivariateSeries:
    """Read a comma-separated file into a ``[C, T]`` series.

    A leading column whose first data cell is not a number is treated as a
    timestamp and dropped. ``columns`` selects value columns by header name
    or by index into the remaining value columns.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if header:
        if not rows:
            raise DataError(f"{path}: empty file")
        names, rows = rows[0], rows[1:]
    else:
        names = None
    if not rows:
        raise DataError(f"{path}: zero data rows")

    width = len(rows[0])
    if names is None:
        names = [f"ch{i}" for i in range(width)]
    skip_first = width > 1 and _parse_float(rows[0][0]) is None
    value_idx = list(range(1 if skip_first else 0, width))
    value_names = [names[i] for i in value_idx]

    if columns is not None:
        picked = []
        for col in columns:
            if isinstance(col, str):
                if col not in value_names:
                    raise DataError(f"{path}: unknown column {col!r}")
                picked.append(value_idx[value_names.index(col)])
            else:
                picked.append(value_idx[col])
        value_idx = picked
        value_names = [names[i] for i in value_idx]

    data = np.empty((len(value_idx), len(rows)), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {r + 1} has {len(row)} fields, expected {width}")
        for c, j in enumerate(value_idx):
            v = _parse_float(row[j])
            if v is None:
                raise DataError(f"{path}: non-numeric cell {row[j]!r} at row {r + 1}, column {names[j]!r}")
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite cell {row[j]!r} at row {r + 1}, column {names[j]!r}")
            data[c, r] = v
    return MultivariateSeries(data, value_names)


def write_csv(series: MultivariateSeries, path: Union[str, Path], labels: Optional[np.ndarray] = None) -> None:
    """Write in the dialect read by :func:`load_csv` (``repr`` floats round-trip exactly)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        head = list(series.channel_names)
        if labels is not None:
            head.append("label")
        w.writerow(head)
        for t in range(series.length):
            row = [repr(float(v)) for v in series.values[:, t]]
            if labels is not None:
                row.append(str(int(labels[t])))
            w.writerow(row)


def split_series(series: MultivariateSeries, spec: Optional[SplitSpec] = None, min_length: int = 1):
    """Split chronologically into (train, val, test)."""
    spec = spec or SplitSpec()
    T = series.length
    if spec.boundaries is not None:
        bounds = [tuple(b) for b in spec.boundaries]
        if len(bounds) != 3:
            raise DataError("explicit boundaries need exactly three (start, stop) pairs")
        for (a, b), (c, _) in zip(bounds, bounds[1:]):
            if b > c:
                raise DataError(f"splits overlap: {bounds}")
        if bounds[0][0] < 0 or bounds[-1][1] > T:
            raise DataError(f"boundaries {bounds} outside series of length {T}")
    else:
        fr = (spec.train_fraction, spec.val_fraction, spec.test_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be non-negative and sum to 1, got {fr}")
        n_train = int(round(T * fr[0]))
        n_val = int(round(T * fr[1]))
        bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, T)]

    out = []
    for i, (a, b) in enumerate(bounds):
        if i > 0 and spec.context:
            a = max(0, a - spec.context)
        if b - a < max(min_length, 1):
            raise DataError(f"split {i} has length {b - a}, need at least {max(min_length, 1)}")
        out.append(series.slice(a, b))
    return tuple(out)


def window_count(length: int, L: int, H: int = 0, stride: int = 1) -> int:
    if L + H > length:
        return 0
    return (length - L - H) // stride + 1


def make_windows(
    series: MultivariateSeries,
    L: int,
    H: int = 0,
    stride: int = 1,
    labels: Optional[np.ndarray] = None,
) -> list[Window]:
    """Sliding windows ordered by start index.

    When per-step ``labels`` are given, each window carries the label of its
    last lookback step.
    """
    if L < 1 or H < 0 or stride < 1:
        raise DataError(f"invalid window parameters L={L}, H={H}, stride={stride}")
    if L + H > series.length:
        raise DataError(f"L + H = {L + H} exceeds series length {series.length}")
    v = series.values
    windows = []
    for k in range(window_count(series.length, L, H, stride)):
        s = k * stride
        horizon = v[:, s + L:s + L + H].copy() if H > 0 else None
        label = int(labels[s + L - 1]) if labels is not None else None
        windows.append(Window(v[:, s:s + L].copy(), horizon, label, s))
    return windows


def instance_normalize(lookback: np.ndarray, eps: float = STD_FLOOR) -> tuple[np.ndarray, NormStats]:
    """Per-channel zero mean / unit (population) variance along the last axis.

    Works for ``[C, L]`` or any batch ``[..., C, L]``; stats keep the leading shape.
    """
    x = np.asarray(lookback, dtype=np.float64)
    mean = x.mean(axis=-1)
    std = np.maximum(x.std(axis=-1), eps)
    return (x - mean[..., None]) / std[..., None], NormStats(mean, std)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[:-1] != np.shape(stats.mean):
        raise DataError(f"channel shape mismatch: values {values.shape[:-1]} vs stats {np.shape(stats.mean)}")
    return values * stats.std[..., None] + stats.mean[..., None]


def channelize(batch: Union[np.ndarray, Sequence[Window]]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten ``[B, C, L]`` into ``B*C`` univariate instances ``[B*C, 1, L]``.

    Returns the instances and an index map of ``(window, channel)`` rows.
    """
    if not isinstance(batch, np.ndarray):
        batch = np.stack([w.lookback for w in batch])
    B, C, L = batch.shape
    index = np.stack(np.meshgrid(np.arange(B), np.arange(C), indexing="ij"), axis=-1).reshape(-1, 2)
    return batch.reshape(B * C, 1, L), index


def dechannelize(instances: np.ndarray, index: np.ndarray) -> np.ndarray:
    B = int(index[:, 0].max()) + 1
    C = int(index[:, 1].max()) + 1
    out = np.empty((B, C) + instances.shape[2:], dtype=instances.dtype)
    out[index[:, 0], index[:, 1]] = instances[:, 0]
    return out


def stack_windows(windows: Sequence[Window]) -> tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """Stack windows into ``[B, C, L]`` lookbacks, ``[B, C, H]`` horizons and ``[B]`` labels."""
    x = np.stack([w.lookback for w in windows])
    y = np.stack([w.horizon for w in windows]) if windows[0].horizon is not None else None
    lab = np.array([w.label for w in windows]) if windows[0].label is not None else None
    return x, y, lab
