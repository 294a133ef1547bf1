"""Daily load series: CSV I/O, chronological splits, scaling, windows and a synthetic generator."""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ONE_DAY = dt.timedelta(days=1)


class DataError(ValueError):
    """Base class for malformed input data."""


class MalformedRowError(DataError):
    pass


class DuplicateDateError(DataError):
    pass


class GapError(DataError):
    pass


class NonPositiveLoadError(DataError):
    pass


class SplitConfigError(ValueError):
    pass


@dataclass
class TimeSeriesDataset:
    id: str
    dates: list[dt.date]
    loads: np.ndarray

    def __post_init__(self):
        self.loads = np.asarray(self.loads, dtype=float)
        if len(self.dates) != len(self.loads):
            raise DataError(f"{self.id}: {len(self.dates)} dates but {len(self.loads)} loads")
        for a, b in zip(self.dates, self.dates[1:]):
            if b - a != ONE_DAY:
                raise GapError(f"{self.id}: dates not contiguous between {a} and {b}")
        if len(self.loads) and not np.all(self.loads > 0):
            raise NonPositiveLoadError(f"{self.id}: loads must be > 0")

    def __len__(self):
        return len(self.dates)

    def index_of(self, day: dt.date) -> int:
        return (day - self.dates[0]).days

    def subset(self, start: dt.date, end: dt.date) -> "TimeSeriesDataset":
        i, j = self.index_of(start), self.index_of(end) + 1
        return TimeSeriesDataset(self.id, self.dates[i:j], self.loads[i:j])


def load_csv(path, dataset_id: str | None = None) -> TimeSeriesDataset:
    """Read a ``date,load`` CSV, rejecting malformed rows, duplicates, gaps and nonpositive loads."""
    path = Path(path)
    dates: list[dt.date] = []
    loads: list[float] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["date", "load"]:
            raise MalformedRowError(f"{path}:1: expected header 'date,load', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise MalformedRowError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                day = dt.date.fromisoformat(row[0].strip())
                load = float(row[1])
            except ValueError as exc:
                raise MalformedRowError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(load) or load <= 0:
                raise NonPositiveLoadError(f"{path}:{lineno}: nonpositive load {row[1].strip()!r} on {day}")
            if dates:
                if day == dates[-1] or day < dates[-1]:
                    raise DuplicateDateError(f"{path}:{lineno}: duplicate or out-of-order date {day}")
                if day - dates[-1] != ONE_DAY:
                    raise GapError(f"{path}:{lineno}: gap, missing date {dates[-1] + ONE_DAY}")
            dates.append(day)
            loads.append(load)
    if not dates:
        raise MalformedRowError(f"{path}: no data rows")
    return TimeSeriesDataset(dataset_id or path.stem, dates, np.array(loads))


def write_csv(ds: TimeSeriesDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("date,load\n")
        for day, load in zip(ds.dates, ds.loads):
            fh.write(f"{day.isoformat()},{float(load)!r}\n")


# --------------------------------------------------------------------------
# splitting

DateRange = tuple[dt.date, dt.date]


def _d(s: str) -> dt.date:
    return dt.date.fromisoformat(s)


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[DateRange, ...] = (
        (_d("2021-01-01"), _d("2021-12-31")),
        (_d("2022-03-01"), _d("2022-12-31")),
    )
    val: DateRange = (_d("2022-01-01"), _d("2022-02-28"))
    test: DateRange = (_d("2023-01-01"), _d("2023-02-28"))

    def ranges(self) -> list[tuple[str, DateRange]]:
        return [("train", r) for r in self.train] + [("val", self.val), ("test", self.test)]

    def to_dict(self) -> dict:
        iso = lambda r: [r[0].isoformat(), r[1].isoformat()]
        return {"train": [iso(r) for r in self.train], "val": iso(self.val), "test": iso(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        rng = lambda r: (_d(r[0]), _d(r[1]))
        return cls(tuple(rng(r) for r in d["train"]), rng(d["val"]), rng(d["test"]))


@dataclass
class Split:
    train: list[TimeSeriesDataset]
    val: TimeSeriesDataset
    test: TimeSeriesDataset
    counts: dict = field(default_factory=dict)

    @property
    def train_loads(self) -> np.ndarray:
        return np.concatenate([s.loads for s in self.train])


def split(ds: TimeSeriesDataset, spec: SplitSpec = SplitSpec()) -> Split:
    """Partition ``ds`` into train segments, validation and test.

    The ranges must be disjoint, lie inside the dataset's span and together
    cover every day of it.
    """
    lo, hi = ds.dates[0], ds.dates[-1]
    named = spec.ranges()
    for name, (a, b) in named:
        if a > b:
            raise SplitConfigError(f"{name} range {a}..{b} is empty")
        if a < lo or b > hi:
            raise SplitConfigError(f"{name} range {a}..{b} outside dataset span {lo}..{hi}")
    ordered = sorted(named, key=lambda item: item[1][0])
    for (n1, (_, b1)), (n2, (a2, _)) in zip(ordered, ordered[1:]):
        if a2 <= b1:
            raise SplitConfigError(f"{n1} and {n2} ranges overlap")
    covered = sum((b - a).days + 1 for _, (a, b) in named)
    if covered != len(ds):
        raise SplitConfigError(f"split covers {covered} of {len(ds)} days")
    train = [ds.subset(a, b) for a, b in spec.train]
    val = ds.subset(*spec.val)
    test = ds.subset(*spec.test)
    counts = {"train": sum(len(t) for t in train), "val": len(val), "test": len(test)}
    return Split(train, val, test, counts)


# --------------------------------------------------------------------------
# scaling and windows


@dataclass(frozen=True)
class StandardScaler:
    mean: float
    scale: float

    @classmethod
    def fit(cls, values) -> "StandardScaler":
        v = np.asarray(values, dtype=float)
        sd = float(v.std())
        return cls(float(v.mean()), sd if sd > 0 else 1.0)

    def transform(self, values):
        return (np.asarray(values, dtype=float) - self.mean) / self.scale

    def inverse(self, values):
        return np.asarray(values, dtype=float) * self.scale + self.mean


@dataclass
class WindowedDataset:
    inputs: np.ndarray      # [n, p], scaled
    targets: np.ndarray     # [n], scaled
    dates: list[dt.date]    # target date per window

    def __len__(self):
        return len(self.targets)

    @property
    def lookback(self) -> int:
        return self.inputs.shape[1]


def make_windows(series: TimeSeriesDataset, p: int, scaler: StandardScaler,
                 context: TimeSeriesDataset | Sequence[float] | None = None) -> WindowedDataset:
    """Sliding windows of ``p`` inputs predicting the next day.

    Without ``context`` the first ``p`` days only serve as inputs. ``context``
    holds the days immediately preceding ``series`` (at least ``p`` of them
    are used); then every day of ``series`` becomes a target.
    """
    if p < 1:
        raise ValueError("lookback p must be >= 1")
    loads = np.asarray(series.loads, dtype=float)
    n_ctx = 0
    if context is not None:
        ctx = np.asarray(context.loads if isinstance(context, TimeSeriesDataset) else context, dtype=float)
        if len(ctx) < p:
            raise ValueError(f"context has {len(ctx)} values, need {p}")
        n_ctx = p
        loads = np.concatenate([ctx[-p:], loads])
    elif len(loads) <= p:
        raise ValueError(f"series of length {len(loads)} too short for lookback {p}")
    scaled = scaler.transform(loads)
    idx = np.arange(p, len(loads))
    inputs = np.lib.stride_tricks.sliding_window_view(scaled, p)[: len(idx)].copy()
    targets = scaled[idx]
    dates = [series.dates[i - n_ctx] for i in idx]
    return WindowedDataset(inputs, targets, dates)


def concat_windows(parts: Sequence[WindowedDataset]) -> WindowedDataset:
    return WindowedDataset(
        np.concatenate([w.inputs for w in parts]),
        np.concatenate([w.targets for w in parts]),
        [d for w in parts for d in w.dates],
    )


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class ClusterProfile:
    """Parameters of one synthetic power-network cluster."""
    base: float = 1000.0
    seasonal_amp: float = 0.2
    phase: float = 0.0
    weekly: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.75)
    noise_sigma: float = 0.03
    spike_prob: float = 0.02
    spike_scale: float = 0.3

    def validate(self):
        if not self.base > 0:
            raise ValueError("base must be > 0")
        if not 0 <= self.seasonal_amp < 1:
            raise ValueError("seasonal_amp must be in [0, 1)")
        if len(self.weekly) != 7 or min(self.weekly) <= 0:
            raise ValueError("weekly needs 7 positive factors")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.spike_prob <= 1:
            raise ValueError("spike_prob must be in [0, 1]")
        if self.spike_scale < 0:
            raise ValueError("spike_scale must be >= 0")


def default_profiles(n: int = 31, seed: int = 0) -> list[ClusterProfile]:
    """Seeded family of distinct cluster profiles (31 by default)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        weekend = rng.uniform(0.6, 0.9)
        weekday = 1.0 + rng.uniform(-0.05, 0.05, size=5)
        out.append(ClusterProfile(
            base=float(np.round(rng.uniform(200.0, 5000.0), 1)),
            seasonal_amp=float(np.round(rng.uniform(0.05, 0.35), 3)),
            phase=float(np.round(rng.uniform(0, 2 * np.pi), 3)),
            weekly=tuple(float(np.round(v, 3)) for v in (*weekday, weekend, weekend * rng.uniform(0.9, 1.0))),
            noise_sigma=float(np.round(rng.uniform(0.01, 0.05), 3)),
            spike_prob=float(np.round(rng.uniform(0.0, 0.04), 3)),
            spike_scale=float(np.round(rng.uniform(0.1, 0.5), 3)),
        ))
    return out


def generate_synthetic(profile: ClusterProfile, n_days: int, seed: int,
                       start: dt.date = dt.date(2021, 1, 1), dataset_id: str = "synthetic") -> TimeSeriesDataset:
    """Daily load with yearly seasonality, a weekly profile, log-normal noise and event spikes.

    Loads are rounded to 3 decimals so the CSV export round-trips exactly.
    """
    if n_days < 60:
        raise ValueError(f"n_days must be >= 60, got {n_days}")
    profile.validate()
    rng = np.random.default_rng(seed)
    t = np.arange(n_days)
    dates = [start + dt.timedelta(days=int(i)) for i in t]
    dow = np.array([d.weekday() for d in dates])
    seasonal = 1.0 + profile.seasonal_amp * np.sin(2 * np.pi * t / 365.25 + profile.phase)
    weekly = np.asarray(profile.weekly)[dow]
    noise = np.exp(rng.normal(0.0, profile.noise_sigma, size=n_days)) if profile.noise_sigma > 0 else np.ones(n_days)
    spikes = rng.random(n_days) < profile.spike_prob
    spike = spikes * profile.base * profile.spike_scale * rng.exponential(1.0, size=n_days)
    load = profile.base * seasonal * weekly * noise + spike
    load = np.maximum(np.round(load, 3), 0.001)
    return TimeSeriesDataset(dataset_id, dates, load)
