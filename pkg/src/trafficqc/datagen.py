"""Synthetic daily traffic-volume series and fault injection.

A day is 288 five-minute counts. Normal days come from a bimodal
(AM/PM peak) profile with Gaussian noise; faulty days are produced by one
of three injectors (point, block, nonresponsive).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_INTERVALS = 288
INTERVALS_PER_HOUR = 12
POINT_FAULT_COUNT = 5
REDUCTION_FACTOR = 0.6  # a 40% decrease
DEFAULT_BLOCK_LENGTHS = (5, 10)


class InvalidFaultError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Label(str, Enum):
    NORMAL = "Normal"
    FAULTY = "Faulty"


class FaultKind(str, Enum):
    POINT = "Point"
    BLOCK = "Block"
    NONRESPONSIVE = "Nonresponsive"


@dataclass(frozen=True)
class FaultSpec:
    """Record of one injected fault.

    ``indices`` is the footprint: the five chosen intervals for a point
    fault, or the contiguous run of ``k`` intervals otherwise.
    """

    kind: FaultKind
    k: int
    seed: int
    indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class TrafficDay:
    station_id: int
    day_index: int
    values: np.ndarray
    label: Label = Label.NORMAL
    fault_applied: FaultSpec | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_INTERVALS,):
            raise ValueError(f"a day has {N_INTERVALS} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("day values must be finite and non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "label", Label(self.label))

    @property
    def key(self) -> tuple[int, int]:
        return (self.station_id, self.day_index)


@dataclass(frozen=True)
class DayProfile:
    base_volume: float
    am_peak: float
    pm_peak: float
    noise_sd: float
    weekend_flag: bool = False

    def validate(self):
        for name in ("base_volume", "am_peak", "pm_peak", "noise_sd"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"profile parameter {name} is not finite")
        if self.base_volume <= 0:
            raise ValueError("base_volume must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.am_peak < 0 or self.pm_peak < 0:
            raise ValueError("peak heights must be non-negative")


# (center hour, width in hours) of the two peaks
_WEEKDAY_PEAKS = ((7.75, 1.25), (17.25, 1.75))
_WEEKEND_PEAKS = ((11.5, 2.5), (16.0, 2.5))


def profile_curve(profile: DayProfile) -> np.ndarray:
    """Noise-free expected counts for every interval of the day."""
    profile.validate()
    hours = np.arange(N_INTERVALS) / INTERVALS_PER_HOUR
    (c_am, w_am), (c_pm, w_pm) = _WEEKEND_PEAKS if profile.weekend_flag else _WEEKDAY_PEAKS
    am = profile.am_peak * np.exp(-0.5 * ((hours - c_am) / w_am) ** 2)
    pm = profile.pm_peak * np.exp(-0.5 * ((hours - c_pm) / w_pm) ** 2)
    return profile.base_volume + am + pm


def synth_day(profile: DayProfile, seed: int, station_id: int = 0, day_index: int = 0) -> TrafficDay:
    curve = profile_curve(profile)
    if profile.noise_sd > 0:
        rng = np.random.default_rng(seed)
        curve = np.maximum(curve + rng.normal(0.0, profile.noise_sd, N_INTERVALS), 0.0)
    return TrafficDay(station_id, day_index, curve)


def _check_k(k: int):
    if not isinstance(k, (int, np.integer)) or k < 1 or k > N_INTERVALS:
        raise InvalidFaultError(f"fault length k must be an integer in [1, {N_INTERVALS}], got {k!r}")


def _with_fault(day: TrafficDay, values: np.ndarray, spec: FaultSpec) -> TrafficDay:
    return replace(day, values=values, label=Label.FAULTY, fault_applied=spec)


def inject_point_fault(day: TrafficDay, seed: int) -> TrafficDay:
    """Reduce five distinct, uniformly chosen intervals by 40%."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(N_INTERVALS, size=POINT_FAULT_COUNT, replace=False))
    values = day.values.copy()
    values[idx] *= REDUCTION_FACTOR
    spec = FaultSpec(FaultKind.POINT, POINT_FAULT_COUNT, seed, tuple(int(i) for i in idx))
    return _with_fault(day, values, spec)


def _segment_start(k: int, seed: int, start: int | None) -> int:
    _check_k(k)
    if start is None:
        return int(np.random.default_rng(seed).integers(0, N_INTERVALS - k + 1))
    if not 0 <= start <= N_INTERVALS - k:
        raise InvalidFaultError(f"segment start {start} out of range [0, {N_INTERVALS - k}]")
    return int(start)


def inject_block_fault(day: TrafficDay, k: int, seed: int, start: int | None = None) -> TrafficDay:
    """Reduce one run of ``k`` consecutive intervals by 40%.

    The run never wraps past midnight. ``start`` pins the run instead of
    drawing it from ``seed``.
    """
    s = _segment_start(k, seed, start)
    values = day.values.copy()
    values[s:s + k] *= REDUCTION_FACTOR
    spec = FaultSpec(FaultKind.BLOCK, int(k), seed, tuple(range(s, s + k)))
    return _with_fault(day, values, spec)


def inject_nonresponsive_fault(day: TrafficDay, k: int, seed: int, start: int | None = None) -> TrafficDay:
    """Zero one run of ``k`` consecutive intervals (a silent sensor)."""
    s = _segment_start(k, seed, start)
    values = day.values.copy()
    values[s:s + k] = 0.0
    spec = FaultSpec(FaultKind.NONRESPONSIVE, int(k), seed, tuple(range(s, s + k)))
    return _with_fault(day, values, spec)


def inject_fault(day: TrafficDay, kind: FaultKind, k: int, seed: int) -> TrafficDay:
    kind = FaultKind(kind)
    if kind is FaultKind.POINT:
        return inject_point_fault(day, seed)
    if kind is FaultKind.BLOCK:
        return inject_block_fault(day, k, seed)
    return inject_nonresponsive_fault(day, k, seed)


@dataclass(frozen=True)
class DatasetConfig:
    n_positive: int = 4000
    n_negative: int = 2000
    n_mixed_normal: int = 2000
    n_mixed_faulty: int = 2000
    fault_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    n_stations: int = 50
    block_lengths: tuple[int, ...] = DEFAULT_BLOCK_LENGTHS

    def validate(self):
        counts = (self.n_positive, self.n_negative, self.n_mixed_normal, self.n_mixed_faulty)
        if any(int(c) != c or c < 0 for c in counts):
            raise ConfigError(f"dataset sizes must be non-negative integers, got {counts}")
        if self.n_stations < 1:
            raise ConfigError("n_stations must be at least 1")
        mix = np.asarray(self.fault_mix, dtype=float)
        if mix.shape != (3,) or not np.all(np.isfinite(mix)) or np.any(mix < 0) or abs(mix.sum() - 1) > 1e-9:
            raise ConfigError(f"fault_mix must be three non-negative weights summing to 1, got {self.fault_mix}")
        if not self.block_lengths:
            raise ConfigError("block_lengths must not be empty")
        for k in self.block_lengths:
            try:
                _check_k(k)
            except InvalidFaultError as exc:
                raise ConfigError(str(exc)) from None


def station_profile(config_seed: int, station_id: int) -> DayProfile:
    """Station-level typical weekday profile; fixed for a given config seed."""
    rng = np.random.default_rng([config_seed, 0xA11CE, station_id])
    return DayProfile(
        base_volume=float(rng.uniform(15.0, 40.0)),
        am_peak=float(rng.uniform(120.0, 320.0)),
        pm_peak=float(rng.uniform(150.0, 360.0)),
        noise_sd=float(rng.uniform(2.0, 6.0)),
    )


def _day_profile(station: DayProfile, day_index: int, rng: np.random.Generator) -> DayProfile:
    weekend = day_index % 7 >= 5
    scale = 0.7 if weekend else 1.0
    return DayProfile(
        base_volume=station.base_volume * float(rng.lognormal(0.0, 0.1)),
        am_peak=station.am_peak * scale * float(rng.lognormal(0.0, 0.1)),
        pm_peak=station.pm_peak * scale * float(rng.lognormal(0.0, 0.1)),
        noise_sd=station.noise_sd,
        weekend_flag=weekend,
    )


_DATASET_CODES = {"positive": 1, "negative": 2, "mixed": 3}
_FAULT_ORDER = (FaultKind.POINT, FaultKind.BLOCK, FaultKind.NONRESPONSIVE)


def _generate_record(config: DatasetConfig, dataset: str, j: int, day_offset: int, faulty: bool) -> TrafficDay:
    # every record owns a seed derived from (config seed, dataset, position),
    # so output does not depend on generation order
    rng = np.random.default_rng([config.seed, _DATASET_CODES[dataset], j])
    station_id = j % config.n_stations
    day_index = day_offset + j // config.n_stations
    profile = _day_profile(station_profile(config.seed, station_id), day_index, rng)
    day_seed, fault_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    day = synth_day(profile, day_seed, station_id, day_index)
    if not faulty:
        return day
    kind = _FAULT_ORDER[int(rng.choice(3, p=np.asarray(config.fault_mix, dtype=float)))]
    k = int(rng.choice(np.asarray(config.block_lengths)))
    return inject_fault(day, kind, k, fault_seed)


def build_datasets(config: DatasetConfig) -> dict[str, list[TrafficDay]]:
    """Generate the positive, negative and mixed datasets.

    Each dataset occupies its own range of day indices, so no
    (station_id, day_index) pair is shared across datasets.
    """
    config.validate()

    def n_days(n):
        return -(-n // config.n_stations)

    n_mixed = config.n_mixed_normal + config.n_mixed_faulty
    pos_offset = 0
    neg_offset = pos_offset + n_days(config.n_positive)
    mix_offset = neg_offset + n_days(config.n_negative)
    return {
        "positive": [_generate_record(config, "positive", j, pos_offset, False) for j in range(config.n_positive)],
        "negative": [_generate_record(config, "negative", j, neg_offset, True) for j in range(config.n_negative)],
        "mixed": [
            _generate_record(config, "mixed", j, mix_offset, j >= config.n_mixed_normal) for j in range(n_mixed)
        ],
    }


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled 60/20/20 index partition.

    Validation and test get round(0.2 n) items each and train takes the
    rest, which keeps every part within one item of its share.
    """
    if n <= 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = n_test = (2 * n + 5) // 10
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def split_dataset(days: Sequence, seed: int) -> DatasetSplit:
    tr, va, te = split_indices(len(days), seed)
    return DatasetSplit(
        train=[days[i] for i in tr],
        validation=[days[i] for i in va],
        test=[days[i] for i in te],
        seed=seed,
    )


CSV_HEADER = ["station_id", "day_index", "label", "fault_kind", "fault_k"] + [f"v{i}" for i in range(N_INTERVALS)]


def write_days_csv(path: str | Path, days: Iterable[TrafficDay]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for day in days:
            fault = day.fault_applied
            writer.writerow(
                [day.station_id, day.day_index, day.label.value,
                 fault.kind.value if fault else "", fault.k if fault else ""]
                + [repr(float(v)) for v in day.values]
            )


def read_days_csv(path: str | Path) -> list[TrafficDay]:
    days = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected dataset header")
        for row in reader:
            fault = None
            if row[3]:
                # the CSV keeps kind and k only; seed and footprint are not serialized
                fault = FaultSpec(FaultKind(row[3]), int(row[4]), seed=-1)
            days.append(TrafficDay(int(row[0]), int(row[1]), np.array(row[5:], dtype=np.float64), Label(row[2]), fault))
    return days
