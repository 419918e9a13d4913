"""Hourly load/temperature series and the lagged feature bundles fed to the
forecasting networks.

A dataset is a contiguous hourly series on a strict one-hour grid. CSV
ingestion repairs gaps of up to three hours by linear interpolation and
averages duplicate timestamps (the two artifacts DST transitions leave in
local-time data); anything worse is rejected. Normalization constants are the
training-range maxima and travel with the dataset object so validation/test
features are scaled exactly like the training features.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

HOURS_PER_DAY = 24
WEEK_LAGS = (1, 2, 3, 4)          # weeks before the target instant
DAY_LAGS = (1, 2, 3, 4, 5, 6, 7)  # days before the target instant
HOUR_WINDOW = 24                  # most recent hourly loads before the target
DEFAULT_MONTH_LAGS = 6            # 4, 8, ..., 24 weeks before the target
MAX_GAP_HOURS = 3

HOUR = timedelta(hours=1)
SYNTHETIC_START = datetime(2019, 1, 1)

SEASON_NAMES = ("spring", "summer", "autumn", "winter")


class DataError(ValueError):
    """Base class for dataset construction and feature extraction failures."""


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class OrderingError(DataError):
    """Timestamps move backwards."""


class DataGapError(DataError):
    """A gap longer than MAX_GAP_HOURS."""


class RangeError(DataError):
    """A date range that is empty or falls outside the dataset."""


class HistoryError(DataError):
    """Not enough history before the requested target day."""

    def __init__(self, message: str, earliest: Optional[date] = None):
        super().__init__(message)
        self.earliest = earliest


def month_lag_weeks(month_lags: int = DEFAULT_MONTH_LAGS) -> tuple[int, ...]:
    """Week offsets of the long-horizon lag bundle: 4, 8, ..., 4*month_lags."""
    return tuple(4 * (i + 1) for i in range(month_lags))


def history_hours(month_lags: int = DEFAULT_MONTH_LAGS) -> int:
    """Hours of history the deepest lag reaches back."""
    return month_lag_weeks(month_lags)[-1] * 7 * HOURS_PER_DAY


@dataclass(frozen=True)
class DateRange:
    """Inclusive calendar-day interval."""

    start: date
    end: date

    def __post_init__(self):
        if self.end < self.start:
            raise RangeError(f"empty date range {self.start}..{self.end}")

    @property
    def n_days(self) -> int:
        return (self.end - self.start).days + 1

    def days(self) -> Iterator[date]:
        d = self.start
        while d <= self.end:
            yield d
            d += timedelta(days=1)

    def contains(self, d: date) -> bool:
        return self.start <= d <= self.end

    def overlaps(self, other: "DateRange") -> bool:
        return self.start <= other.end and other.start <= self.end


@dataclass
class TimeSeriesDataset:
    """Contiguous hourly series of raw load and raw temperature.

    Treat instances as immutable once normalization has been fitted; every
    derived feature is computed from the raw arrays on demand.
    """

    start: datetime
    load: np.ndarray
    temperature: np.ndarray
    max_load: Optional[float] = None
    max_temp: Optional[float] = None
    repaired_gaps: list = field(default_factory=list)
    merged_duplicates: int = 0

    def __post_init__(self):
        self.load = np.ascontiguousarray(self.load, dtype=np.float64)
        self.temperature = np.ascontiguousarray(self.temperature, dtype=np.float64)
        if self.load.ndim != 1 or self.temperature.shape != self.load.shape:
            raise DataError("load and temperature must be 1-d arrays of equal length")
        if self.load.size == 0:
            raise DataError("empty dataset")
        if self.start.minute or self.start.second or self.start.microsecond:
            raise DataError("series must start on a whole hour")
        self._norm_load: Optional[np.ndarray] = None
        self._norm_temp: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.load.size)

    @property
    def end(self) -> datetime:
        return self.start + (len(self) - 1) * HOUR

    @property
    def timestamps(self) -> np.ndarray:
        base = np.datetime64(self.start, "h")
        return base + np.arange(len(self), dtype="timedelta64[h]")

    def index_of(self, instant: datetime) -> int:
        delta = instant - self.start
        if delta % HOUR:
            raise DataError(f"{instant} is not on the hourly grid")
        idx = delta // HOUR
        if not 0 <= idx < len(self):
            raise RangeError(f"{instant} outside dataset {self.start}..{self.end}")
        return int(idx)

    def timestamp_at(self, idx: int) -> datetime:
        return self.start + idx * HOUR

    def covers_day(self, d: date) -> bool:
        first = datetime.combine(d, time())
        last = first + (HOURS_PER_DAY - 1) * HOUR
        return self.start <= first and last <= self.end

    def day_slice(self, d: date) -> slice:
        i0 = self.index_of(datetime.combine(d, time()))
        if i0 + HOURS_PER_DAY > len(self):
            raise RangeError(f"day {d} not fully covered by dataset")
        return slice(i0, i0 + HOURS_PER_DAY)

    def index_span(self, drange: DateRange) -> tuple[int, int]:
        """Index half-open span [i0, i1) covering every hour of the range."""
        i0 = self.index_of(datetime.combine(drange.start, time()))
        i1 = self.index_of(datetime.combine(drange.end, time()) + (HOURS_PER_DAY - 1) * HOUR)
        return i0, i1 + 1

    def normalized_load(self) -> np.ndarray:
        if self.max_load is None:
            raise DataError("normalization constants not fitted")
        if self._norm_load is None:
            self._norm_load = self.load / self.max_load
        return self._norm_load

    def normalized_temperature(self) -> np.ndarray:
        if self.max_temp is None:
            raise DataError("normalization constants not fitted")
        if self._norm_temp is None:
            self._norm_temp = self.temperature / self.max_temp
        return self._norm_temp

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.start.isoformat().encode())
        h.update(self.load.tobytes())
        h.update(self.temperature.tobytes())
        return h.hexdigest()


def fit_normalization(dataset: TimeSeriesDataset, train_range: DateRange) -> tuple[float, float]:
    """Fix the load/temperature scale to the training-range maxima.

    Values outside the training range may normalize above 1; that is expected.
    Returns (max_load, max_temp) and stores them on the dataset. Refitting with
    the same range is idempotent: normalized values always derive from the raw
    arrays.
    """
    i0, i1 = dataset.index_span(train_range)
    loads = dataset.load[i0:i1]
    temps = dataset.temperature[i0:i1]
    if loads.size == 0:
        raise RangeError("empty training range")
    if loads.min() <= 0:
        raise DataError("training-range loads must be strictly positive")
    max_load = float(loads.max())
    max_temp = float(temps.max())
    if max_temp <= 0:
        raise DataError("training-range temperature maximum must be positive")
    dataset.max_load = max_load
    dataset.max_temp = max_temp
    dataset._norm_load = None
    dataset._norm_temp = None
    return max_load, max_temp


# --- CSV ingestion -----------------------------------------------------------

def load_csv(path) -> TimeSeriesDataset:
    """Read `timestamp,load,temperature` rows (ISO-8601 local time, optional
    header) into a contiguous hourly dataset.

    Duplicate timestamps are averaged; gaps of up to three hours are linearly
    interpolated and recorded in `repaired_gaps`; longer gaps raise
    DataGapError.
    """
    grouped: list[list] = []  # [timestamp, [loads], [temps]]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            first = row[0].strip()
            if line_no == 1 and first and not first[0].isdigit():
                continue  # header
            if len(row) != 3:
                raise ParseError(line_no, f"expected 3 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(first)
            except ValueError as exc:
                raise ParseError(line_no, f"bad timestamp {first!r}: {exc}") from None
            if ts.tzinfo is not None:
                ts = ts.replace(tzinfo=None)  # local wall-clock time
            if ts.minute or ts.second or ts.microsecond:
                raise ParseError(line_no, f"timestamp {first!r} is not a whole hour")
            try:
                load = float(row[1])
                temp = float(row[2])
            except ValueError as exc:
                raise ParseError(line_no, f"bad number: {exc}") from None
            if grouped and ts == grouped[-1][0]:
                grouped[-1][1].append(load)
                grouped[-1][2].append(temp)
            elif grouped and ts < grouped[-1][0]:
                raise OrderingError(f"line {line_no}: timestamp {ts} moves backwards")
            else:
                grouped.append([ts, [load], [temp]])
    if not grouped:
        raise DataError(f"{path}: no data rows")

    merged = sum(len(g[1]) - 1 for g in grouped)
    times: list[datetime] = []
    loads: list[float] = []
    temps: list[float] = []
    repaired: list[tuple[datetime, int]] = []
    for i, (ts, ls, tm) in enumerate(grouped):
        lo = float(np.mean(ls))
        te = float(np.mean(tm))
        if times:
            gap = int((ts - times[-1]) / HOUR) - 1
            if gap > MAX_GAP_HOURS:
                raise DataGapError(f"{gap}-hour gap after {times[-1].isoformat()}")
            for j in range(1, gap + 1):
                frac = j / (gap + 1)
                times.append(times[-1] + HOUR)
                loads.append((1 - frac) * prev_lo + frac * lo)
                temps.append((1 - frac) * prev_te + frac * te)
            if gap > 0:
                repaired.append((times[-gap], gap))
        times.append(ts)
        loads.append(lo)
        temps.append(te)
        prev_lo, prev_te = lo, te
    return TimeSeriesDataset(
        times[0],
        np.array(loads),
        np.array(temps),
        repaired_gaps=repaired,
        merged_duplicates=merged,
    )


def write_csv(dataset: TimeSeriesDataset, path, header: bool = True) -> None:
    """Emit the raw series in the same format load_csv reads (lossless floats)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(["timestamp", "load", "temperature"])
        ts = dataset.start
        for lo, te in zip(dataset.load, dataset.temperature):
            writer.writerow([ts.isoformat(sep="T"), repr(float(lo)), repr(float(te))])
            ts += HOUR


# --- calendar codes ----------------------------------------------------------

def _season_index(d: date) -> int:
    md = (d.month, d.day)
    if (3, 8) <= md <= (6, 7):
        return 0  # spring
    if (6, 8) <= md <= (9, 7):
        return 1  # summer
    if (9, 8) <= md <= (12, 7):
        return 2  # autumn
    return 3      # winter wraps the year end


def thanksgiving(year: int) -> date:
    nov1 = date(year, 11, 1)
    first_thursday = nov1 + timedelta(days=(3 - nov1.weekday()) % 7)
    return first_thursday + timedelta(days=21)


def is_holiday(d: date) -> bool:
    """Christmas Eve, Thanksgiving, or Independence Day."""
    if (d.month, d.day) in ((12, 24), (7, 4)):
        return True
    return d.month == 11 and d == thanksgiving(d.year)


@dataclass(frozen=True)
class CalendarCode:
    """One-hot day descriptors: season (4), weekday/weekend (2), holiday (2)."""

    season: np.ndarray
    weekday: np.ndarray
    holiday: np.ndarray


def calendar_code(d: date) -> CalendarCode:
    season = np.zeros(4)
    season[_season_index(d)] = 1.0
    weekday = np.array([1.0, 0.0]) if d.weekday() < 5 else np.array([0.0, 1.0])
    holiday = np.array([1.0, 0.0]) if is_holiday(d) else np.array([0.0, 1.0])
    return CalendarCode(season, weekday, holiday)


# --- feature bundles ---------------------------------------------------------

@dataclass
class HourInput:
    """Normalized inputs of one per-hour subnetwork (hour_index is 1..24).

    The trailing `autoregressive_slots` entries of l_hour fall inside the
    target day itself; at forecast time the network replaces them with its own
    earlier outputs, so their dataset values are never consumed.
    """

    l_month: np.ndarray
    l_week: np.ndarray
    l_day: np.ndarray
    l_hour: np.ndarray
    t_month: np.ndarray
    t_week: np.ndarray
    t_day: np.ndarray
    t_h: float
    calendar: CalendarCode
    hour_index: int

    @property
    def autoregressive_slots(self) -> int:
        return self.hour_index - 1


@dataclass
class DayInput:
    """24 HourInputs plus the day's actual normalized loads as target."""

    day: date
    hours: list
    target: Optional[np.ndarray] = None


def earliest_forecast_day(dataset: TimeSeriesDataset, month_lags: int = DEFAULT_MONTH_LAGS) -> date:
    """First day with full lag history; raises if the dataset is too short."""
    need = history_hours(month_lags)
    first = dataset.start + need * HOUR
    if first.time() != time():
        first = datetime.combine(first.date() + timedelta(days=1), time())
    if first + (HOURS_PER_DAY - 1) * HOUR > dataset.end:
        raise DataError(
            f"dataset too short: {len(dataset)} hours, need {need + HOURS_PER_DAY}"
        )
    return first.date()


def build_hour_input(
    dataset: TimeSeriesDataset,
    target_day: date,
    h: int,
    month_lags: int = DEFAULT_MONTH_LAGS,
) -> HourInput:
    """Assemble the lag bundle for hour h (1..24) of target_day.

    Hour h maps to the instant target_day (h-1):00. Lags are taken relative to
    that instant: the month bundle at 4,8,...,4*month_lags weeks back, the week
    bundle at 1..4 weeks back (same weekday, same hour), the day bundle at 1..7
    days back (same hour), and l_hour as the 24 instants immediately before it,
    in chronological order. All values are normalized.
    """
    if not 1 <= h <= HOURS_PER_DAY:
        raise ValueError(f"hour index {h} outside 1..24")
    ln = dataset.normalized_load()
    tn = dataset.normalized_temperature()
    instant = datetime.combine(target_day, time()) + (h - 1) * HOUR
    t_idx = dataset.index_of(instant)
    deepest = history_hours(month_lags)
    if t_idx - deepest < 0:
        earliest = earliest_forecast_day(dataset, month_lags)
        raise HistoryError(
            f"not enough history before {target_day}; earliest usable target day is {earliest}",
            earliest,
        )
    month_idx = np.array([t_idx - w * 7 * HOURS_PER_DAY for w in month_lag_weeks(month_lags)])
    week_idx = np.array([t_idx - w * 7 * HOURS_PER_DAY for w in WEEK_LAGS])
    day_idx = np.array([t_idx - d * HOURS_PER_DAY for d in DAY_LAGS])
    return HourInput(
        l_month=ln[month_idx],
        l_week=ln[week_idx],
        l_day=ln[day_idx],
        l_hour=ln[t_idx - HOUR_WINDOW:t_idx].copy(),
        t_month=tn[month_idx],
        t_week=tn[week_idx],
        t_day=tn[day_idx],
        t_h=float(tn[t_idx]),
        calendar=calendar_code(target_day),
        hour_index=h,
    )


def build_day_input(
    dataset: TimeSeriesDataset,
    target_day: date,
    month_lags: int = DEFAULT_MONTH_LAGS,
) -> DayInput:
    if not dataset.covers_day(target_day):
        raise RangeError(f"day {target_day} not fully covered by dataset")
    hours = [build_hour_input(dataset, target_day, h, month_lags) for h in range(1, 25)]
    target = dataset.normalized_load()[dataset.day_slice(target_day)].copy()
    return DayInput(day=target_day, hours=hours, target=target)


@dataclass
class HourBlock:
    """Batched per-hour features: rows are days, laid out for the network."""

    pair_month: np.ndarray  # [l_month, t_month]              (n, 2*month_lags)
    pair_week: np.ndarray   # [l_week, t_week]                (n, 8)
    pair_day: np.ndarray    # [l_day, t_day]                  (n, 14)
    l_hour: np.ndarray      #                                 (n, 24)
    cal_sw: np.ndarray      # [season, weekday]               (n, 6)
    cal_h: np.ndarray       # holiday one-hot                 (n, 2)
    t_h: np.ndarray         #                                 (n, 1)

    def take(self, idx) -> "HourBlock":
        return HourBlock(*(getattr(self, f)[idx] for f in (
            "pair_month", "pair_week", "pair_day", "l_hour", "cal_sw", "cal_h", "t_h")))


@dataclass
class DayBatch:
    """A stack of DayInputs ready for batched forward passes."""

    hours: list
    target: Optional[np.ndarray]
    days: list

    @property
    def n(self) -> int:
        return self.hours[0].l_hour.shape[0]

    def take(self, idx) -> "DayBatch":
        hours = [hb.take(idx) for hb in self.hours]
        target = None if self.target is None else self.target[idx]
        days = [self.days[i] for i in np.atleast_1d(idx)]
        return DayBatch(hours, target, days)


def day_batch(inputs: Sequence[DayInput]) -> DayBatch:
    if not inputs:
        raise DataError("no days to batch")
    hours = []
    for k in range(HOURS_PER_DAY):
        his = [di.hours[k] for di in inputs]
        hours.append(HourBlock(
            pair_month=np.stack([np.concatenate([hi.l_month, hi.t_month]) for hi in his]),
            pair_week=np.stack([np.concatenate([hi.l_week, hi.t_week]) for hi in his]),
            pair_day=np.stack([np.concatenate([hi.l_day, hi.t_day]) for hi in his]),
            l_hour=np.stack([hi.l_hour for hi in his]),
            cal_sw=np.stack([np.concatenate([hi.calendar.season, hi.calendar.weekday]) for hi in his]),
            cal_h=np.stack([hi.calendar.holiday for hi in his]),
            t_h=np.array([[hi.t_h] for hi in his]),
        ))
    if all(di.target is not None for di in inputs):
        target = np.stack([di.target for di in inputs])
    else:
        target = None
    return DayBatch(hours=hours, target=target, days=[di.day for di in inputs])


def build_day_batch(
    dataset: TimeSeriesDataset,
    days: Iterable[date],
    month_lags: int = DEFAULT_MONTH_LAGS,
) -> DayBatch:
    return day_batch([build_day_input(dataset, d, month_lags) for d in days])


def usable_days(
    dataset: TimeSeriesDataset,
    drange: DateRange,
    month_lags: int = DEFAULT_MONTH_LAGS,
) -> list[date]:
    """Days in the range with full lag history and full coverage."""
    earliest = earliest_forecast_day(dataset, month_lags)
    return [d for d in drange.days() if d >= earliest and dataset.covers_day(d)]


# --- perturbation and synthetic data -----------------------------------------

def perturb_temperature(dataset: TimeSeriesDataset, std_f: float, seed: int) -> TimeSeriesDataset:
    """Copy the dataset with N(0, std_f^2) noise added to the raw temperature.

    The load channel is untouched and the original normalization constants are
    kept, so perturbed temperatures are rescaled exactly like the originals.
    """
    if std_f < 0:
        raise ValueError("std_f must be nonnegative")
    temp = dataset.temperature.copy()
    if std_f > 0:
        temp += np.random.default_rng(seed).normal(0.0, std_f, temp.shape)
    return TimeSeriesDataset(
        dataset.start,
        dataset.load.copy(),
        temp,
        max_load=dataset.max_load,
        max_temp=dataset.max_temp,
    )


def synthetic_dataset(days: int, seed: int) -> TimeSeriesDataset:
    """Deterministic synthetic series with realistic structure.

    Load = base + daily double-hump shape + weekend dip + a V-shaped
    temperature coupling + Gaussian noise; temperature = seasonal cycle +
    diurnal cycle + an AR(1) synoptic anomaly + noise. The temperature
    coupling is what makes a week-ago persistence forecast beatable.
    """
    if days < 200:
        raise ValueError("synthetic dataset needs at least 200 days")
    rng = np.random.default_rng(seed)
    n = days * HOURS_PER_DAY
    t = np.arange(n)
    hod = t % HOURS_PER_DAY
    day_idx = t // HOURS_PER_DAY
    dow = (day_idx + SYNTHETIC_START.weekday()) % 7

    seasonal = 22.0 * np.sin(2 * np.pi * (day_idx - 105) / 365.25)
    diurnal = 7.0 * np.sin(2 * np.pi * (hod - 9) / 24)
    synoptic = lfilter([1.0], [1.0, -0.98], rng.normal(0.0, 1.2, n))
    temperature = 55.0 + seasonal + diurnal + synoptic + rng.normal(0.0, 0.8, n)

    daily = 150.0 * np.sin(2 * np.pi * (hod - 10) / 24) + 60.0 * np.sin(4 * np.pi * (hod - 2) / 24)
    weekend = np.where(dow >= 5, -85.0, 0.0)
    coupling = 4.5 * np.abs(temperature - 58.0)
    load = 850.0 + daily + weekend + coupling + rng.normal(0.0, 6.0, n)
    return TimeSeriesDataset(SYNTHETIC_START, load, temperature)
