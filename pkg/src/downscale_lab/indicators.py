"""Temperature climate indicators over daily series.

Threshold comparisons are strict: a day exactly at the threshold contributes
nothing. A period is valid only when every calendar day in it is present and
finite; invalid periods still carry the value computed from available days.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import ConfigError

KELVIN_OFFSET = 273.15
UNIT_K = "K"
UNIT_KDAY = "K d"


@dataclass(frozen=True)
class DailySeries:
    start_date: dt.date
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).reshape(-1))

    def dates(self):
        return np.datetime64(self.start_date, "D") + np.arange(self.values.size)

    def shifted(self, delta: float) -> "DailySeries":
        return DailySeries(self.start_date, self.values + delta)


@dataclass(frozen=True)
class IndicatorValue:
    period: tuple  # (year,) or (year, month)
    value: float
    unit: str
    valid: bool

    @property
    def year(self):
        return self.period[0]

    @property
    def month(self):
        return self.period[1] if len(self.period) > 1 else None


def _groups(series: DailySeries, freq: str):
    """Contiguous period groups: (keys, starts, lengths, expected calendar lengths)."""
    dates = series.dates()
    years = dates.astype("datetime64[Y]")
    if freq == "year":
        keys = years
        period_start = years.astype("datetime64[D]")
        period_end = (years + 1).astype("datetime64[D]")
    elif freq == "month":
        keys = dates.astype("datetime64[M]")
        period_start = keys.astype("datetime64[D]")
        period_end = (keys + 1).astype("datetime64[D]")
    else:
        raise ConfigError(f"unknown frequency {freq!r}")
    if dates.size == 0:
        return [], np.array([], int), np.array([], int), np.array([], int)
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    lengths = np.diff(np.r_[starts, dates.size])
    expected = (period_end[starts] - period_start[starts]).astype(int)
    if freq == "year":
        labels = [(int(str(k)),) for k in keys[starts]]
    else:
        labels = [(int(str(k)[:4]), int(str(k)[5:7])) for k in keys[starts]]
    return labels, starts, lengths, expected


def _aggregate(series: DailySeries, daily: np.ndarray, freq: str, how: str, unit: str):
    labels, starts, lengths, expected = _groups(series, freq)
    if not labels:
        return []
    present = np.isfinite(series.values)
    filled = np.where(present, daily, 0.0)
    sums = np.add.reduceat(filled, starts)
    counts = np.add.reduceat(present.astype(np.int64), starts)
    with np.errstate(invalid="ignore", divide="ignore"):
        if how == "mean":
            values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        else:
            values = np.where(counts > 0, sums, np.nan)
    valid = (counts == expected) & (lengths == expected)
    return [
        IndicatorValue(label, float(v), unit, bool(ok)) for label, v, ok in zip(labels, values, valid)
    ]


def annual_tg(s: DailySeries):
    """Annual mean of daily mean temperature, in Kelvin."""
    return _aggregate(s, s.values + KELVIN_OFFSET, "year", "mean", UNIT_K)


def monthly_tg(s: DailySeries):
    """Monthly mean of daily mean temperature, in Kelvin."""
    return _aggregate(s, s.values + KELVIN_OFFSET, "month", "mean", UNIT_K)


def degree_days(s: DailySeries, threshold: float, direction: str = "above", freq: str = "year"):
    """Sum of max(0, T - threshold) ("above") or max(0, threshold - T) ("below")."""
    threshold = float(threshold)
    if not np.isfinite(threshold):
        raise ConfigError("degree-day threshold must be finite")
    direction = direction.lower()
    with np.errstate(invalid="ignore"):
        if direction == "above":
            daily = np.where(s.values > threshold, s.values - threshold, 0.0)
        elif direction == "below":
            daily = np.where(s.values < threshold, threshold - s.values, 0.0)
        else:
            raise ConfigError(f"direction must be 'above' or 'below', got {direction!r}")
    return _aggregate(s, daily, freq, "sum", UNIT_KDAY)


GDD_THRESHOLD = 5.0
CDD_THRESHOLD = 22.0
HDD_THRESHOLD = 15.5

INDICATORS = {
    "annual_tg": annual_tg,
    "monthly_tg": monthly_tg,
    "gdd": partial(degree_days, threshold=GDD_THRESHOLD, direction="above"),
    "cdd": partial(degree_days, threshold=CDD_THRESHOLD, direction="above"),
    "hdd": partial(degree_days, threshold=HDD_THRESHOLD, direction="below"),
}

INDICATOR_NAMES = tuple(INDICATORS)


def compute(name: str, series: DailySeries):
    try:
        fn = INDICATORS[name]
    except KeyError:
        raise ConfigError(f"unknown indicator {name!r}; choose from {', '.join(INDICATORS)}") from None
    return fn(series)


def write_indicator_csv(rows, path) -> None:
    """``rows`` is an iterable of (series_id, indicator_name, IndicatorValue)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", "indicator", "year", "month", "value", "unit", "valid"])
        for sid, name, iv in rows:
            month = "" if iv.month is None else iv.month
            writer.writerow([sid, name, iv.year, month, repr(iv.value), iv.unit, int(iv.valid)])
