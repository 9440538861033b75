"""CSV ingestion, train-span normalization, chronological splits, windowing.

The on-disk format is a UTF-8 CSV whose header row holds region labels and
whose subsequent rows each hold one time step of case counts. Normalization
statistics always come from the training span only, so evaluation on the
held-out span measures true generalization.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "EpidemicSeries",
    "NormStats",
    "SplitSpec",
    "WindowSample",
    "denormalize",
    "load_csv",
    "make_windows",
    "normalize",
    "normalize_with",
]


@dataclass
class EpidemicSeries:
    """A region-by-time matrix of non-negative case counts."""

    regions: list[str]
    times: list[int]
    counts: np.ndarray  # N×L, float64

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def length(self) -> int:
        return len(self.times)


def load_csv(path) -> EpidemicSeries:
    """Parse a case-count CSV: header = region labels, one row per time step.

    Raises DataError (with the offending 1-based row number where it applies)
    for ragged rows, non-numeric cells, negative counts, duplicate or empty
    region labels, or a file with no data rows.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]  # tolerate trailing blank lines
    if not rows:
        raise DataError(f"{path}: empty file, expected a header row of region labels")
    header = [c.strip() for c in rows[0]]
    if any(not label for label in header):
        raise DataError(f"{path}: row 1: empty region label in header")
    if len(set(header)) != len(header):
        dupes = sorted({l for l in header if header.count(l) > 1})
        raise DataError(f"{path}: row 1: duplicate region labels {dupes}")
    if len(rows) == 1:
        raise DataError(f"{path}: no data rows after the header")

    n = len(header)
    data = np.empty((len(rows) - 1, n))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != n:
            raise DataError(
                f"{path}: row {i}: expected {n} values, got {len(row)}"
            )
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: row {i}: non-numeric value {cell!r} for region "
                    f"{header[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: row {i}: non-finite value for region {header[j]!r}")
            if v < 0:
                raise DataError(
                    f"{path}: row {i}: negative count {v} for region {header[j]!r}"
                )
            data[i - 2, j] = v
    counts = np.ascontiguousarray(data.T)  # store region-major
    return EpidemicSeries(regions=header, times=list(range(counts.shape[1])), counts=counts)


@dataclass
class SplitSpec:
    """Chronological partition of [0, L) into train, validation, and test.

    Train takes floor(r_train·L) indices, validation the next
    floor(r_val·L), test the remainder. Sample membership is decided by the
    target index, never the input window.
    """

    length: int
    ratios: tuple[float, float, float] = (0.5, 0.2, 0.3)
    train_end: int = field(init=False)
    val_end: int = field(init=False)

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError(f"series length must be positive, got {self.length}")
        if any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be non-negative and sum to 1, got {self.ratios}")
        self.train_end = int(self.ratios[0] * self.length)
        self.val_end = self.train_end + int(self.ratios[1] * self.length)

    def split_of(self, target_index: int) -> str:
        if not 0 <= target_index < self.length:
            raise ConfigError(
                f"target index {target_index} outside series of length {self.length}"
            )
        if target_index < self.train_end:
            return "train"
        if target_index < self.val_end:
            return "val"
        return "test"


@dataclass
class NormStats:
    """Per-region affine ranges fit on the training span.

    mode "per-region" scales each region by its own train min and max;
    mode "global" uses one shared range (stored broadcast to all regions).
    """

    lo: np.ndarray  # (N,)
    hi: np.ndarray  # (N,)
    mode: str = "per-region"

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(lo=np.asarray(d["lo"], dtype=float), hi=np.asarray(d["hi"], dtype=float), mode=d["mode"])


_NORM_MODES = ("per-region", "global")


def normalize(series: EpidemicSeries, split: SplitSpec, mode: str = "per-region"):
    """Min-max scale counts into [0,1] using training-span extrema only.

    Returns (values, stats) where values is the full N×L normalized matrix.
    A region whose training span is constant maps to all zeros. Held-out
    values may fall outside [0,1]; that is expected, not an error.
    """
    if mode not in _NORM_MODES:
        raise ConfigError(f"normalization mode must be one of {_NORM_MODES}, got {mode!r}")
    if split.train_end < 1:
        raise ConfigError(
            f"training span is empty: {split.length} steps at ratio {split.ratios[0]}"
        )
    train = series.counts[:, : split.train_end]
    if mode == "global":
        lo = np.full(series.n_regions, train.min())
        hi = np.full(series.n_regions, train.max())
    else:
        lo = train.min(axis=1)
        hi = train.max(axis=1)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)  # constant region -> zeros
    values = (series.counts - lo[:, None]) / safe[:, None]
    return values, NormStats(lo=lo, hi=hi, mode=mode)


def normalize_with(counts, stats: NormStats):
    """Scale an N×L matrix with previously fitted stats (region axis 0).

    Uses the same arithmetic as normalize, so applying a run's own stats to
    its own data reproduces the training-time matrix exactly.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2 or counts.shape[0] != stats.lo.shape[0]:
        raise ConfigError(
            f"expected a matrix with {stats.lo.shape[0]} region rows, got shape "
            f"{counts.shape}"
        )
    span = stats.hi - stats.lo
    safe = np.where(span > 0, span, 1.0)
    return (counts - stats.lo[:, None]) / safe[:, None]


def denormalize(values, stats: NormStats, axis: int = -1):
    """Inverse of normalize along the region axis (default: last)."""
    values = np.asarray(values, dtype=float)
    n = stats.lo.shape[0]
    if values.shape[axis] != n:
        raise ConfigError(
            f"axis {axis} has size {values.shape[axis]}, expected {n} regions"
        )
    span = np.where(stats.hi - stats.lo > 0, stats.hi - stats.lo, 1.0)
    shape = [1] * values.ndim
    shape[axis] = n
    return values * span.reshape(shape) + stats.lo.reshape(shape)


@dataclass
class WindowSample:
    """One supervised instance: an N×T input block whose last column is time
    t, and the length-N target at time t + h."""

    input: np.ndarray
    target: np.ndarray
    t: int


def make_windows(values, window: int, horizon: int, split: SplitSpec):
    """Slice an N×L matrix into per-split lists of WindowSample.

    The sample anchored at t uses columns [t-window+1, t] as input and
    column t+horizon as target; it belongs to the split containing the
    target index. Total count across splits is L - window - horizon + 1.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ConfigError(f"expected an N×L matrix, got shape {values.shape}")
    n, length = values.shape
    if length != split.length:
        raise ConfigError(
            f"series length {length} does not match split over {split.length} steps"
        )
    if window < 1 or horizon < 1:
        raise ConfigError(f"window and horizon must be >= 1, got {window} and {horizon}")
    if length < window + horizon:
        raise ConfigError(
            f"series length {length} too short for window {window} and horizon "
            f"{horizon}; need at least {window + horizon}"
        )
    out: dict[str, list[WindowSample]] = {"train": [], "val": [], "test": []}
    for t in range(window - 1, length - horizon):
        sample = WindowSample(
            input=values[:, t - window + 1 : t + 1].copy(),
            target=values[:, t + horizon].copy(),
            t=t,
        )
        out[split.split_of(t + horizon)].append(sample)
    return out
