"""Station-anchored indicator RMSE for downscaled grids."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoValidSamples
from .grid import DailyGridSeries, Station, StationSet
from .indicators import INDICATOR_NAMES, DailySeries, compute


def station_pixel_series(grid: DailyGridSeries, st: Station) -> DailySeries:
    """Daily series of the grid cell containing the station (no interpolation)."""
    r, c = grid.pixel_of(st.x, st.y)
    return DailySeries(grid.start_date, np.array(grid.values[:, r, c]))


def station_observed_series(st: Station, start: dt.date, end: dt.date) -> DailySeries:
    """Observations on [start, end] as a dense series, NaN where absent."""
    n = (end - start).days + 1
    values = np.full(n, np.nan)
    for day, v in st.observations.items():
        k = (day - start).days
        if 0 <= k < n:
            values[k] = v
    return DailySeries(start, values)


@dataclass
class EvalPair:
    station_id: str
    indicator: str
    periods: list
    truth: np.ndarray
    pred: np.ndarray

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.float64)
        self.pred = np.asarray(self.pred, dtype=np.float64)
        if not (len(self.periods) == self.truth.size == self.pred.size):
            raise ValueError("EvalPair periods, truth and prediction must align")


def indicator_rmse(pairs) -> float:
    """sqrt(mean over all retained (t, n) of (pred - truth)^2)."""
    sq, m = 0.0, 0
    for p in pairs:
        d = p.pred - p.truth
        sq += float(np.dot(d, d))
        m += d.size
    if m == 0:
        raise NoValidSamples("no valid (period, station) samples to evaluate")
    return math.sqrt(sq / m)


def align(station_id, indicator, truth_values, pred_values, periods):
    """EvalPair over ``periods`` keeping only entries valid on both sides.

    Returns (pair, n_skipped).
    """
    truth = {iv.period: iv for iv in truth_values}
    pred = {iv.period: iv for iv in pred_values}
    kept, t_vals, p_vals = [], [], []
    for period in periods:
        a, b = truth.get(period), pred.get(period)
        if a is not None and b is not None and a.valid and b.valid:
            kept.append(period)
            t_vals.append(a.value)
            p_vals.append(b.value)
    return EvalPair(station_id, indicator, kept, t_vals, p_vals), len(periods) - len(kept)


def test_periods(indicator: str, years):
    years = sorted(int(y) for y in years)
    if indicator == "monthly_tg":
        return [(y, m) for y in years for m in range(1, 13)]
    return [(y,) for y in years]


@dataclass
class IndicatorResult:
    indicator: str
    rmse: float
    n_stations: int
    n_samples: int
    n_skipped: int
    per_station: dict = field(default_factory=dict)  # id -> (rmse, n_samples)


@dataclass
class EvalReport:
    method: str
    results: dict  # indicator -> IndicatorResult
    excluded_stations: dict = field(default_factory=dict)  # indicator -> [ids]

    def rmse(self, indicator) -> float:
        return self.results[indicator].rmse

    def rows(self):
        for name, r in self.results.items():
            yield (self.method, name, r.rmse, r.n_stations, r.n_samples, r.n_skipped)


def evaluate_method(downscaled: DailyGridSeries, stations: StationSet, indicators=INDICATOR_NAMES,
                    test_years=(), method: str = "method") -> EvalReport:
    """Indicator RMSE between station observations and containing-pixel series."""
    years = sorted(int(y) for y in test_years) or sorted(set(int(y) for y in downscaled.years()))
    start, end = dt.date(years[0], 1, 1), dt.date(years[-1], 12, 31)
    indicators = list(indicators)
    pairs = {name: [] for name in indicators}
    skipped = {name: 0 for name in indicators}
    excluded = {name: [] for name in indicators}
    for st in stations:
        grid_series = station_pixel_series(downscaled, st)
        obs_series = station_observed_series(st, start, end)
        for name in indicators:
            periods = test_periods(name, years)
            pair, n_skip = align(
                st.id, name, compute(name, obs_series), compute(name, grid_series), periods
            )
            skipped[name] += n_skip
            if pair.truth.size:
                pairs[name].append(pair)
            else:
                excluded[name].append(st.id)
    results = {}
    for name in indicators:
        per_station = {p.station_id: (indicator_rmse([p]), p.truth.size) for p in pairs[name]}
        results[name] = IndicatorResult(
            name,
            indicator_rmse(pairs[name]),
            len(pairs[name]),
            sum(p.truth.size for p in pairs[name]),
            skipped[name],
            per_station,
        )
    return EvalReport(method, results, excluded)


REPORT_HEADER = ["method", "indicator", "rmse", "n_stations", "n_samples", "n_skipped"]


def write_report_csv(reports, path, per_station_path=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for rep in reports:
            for method, name, rmse, n_st, n_s, n_sk in rep.rows():
                writer.writerow([method, name, repr(rmse), n_st, n_s, n_sk])
    if per_station_path is not None:
        with open(per_station_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "indicator", "station_id", "rmse", "n_samples"])
            for rep in reports:
                for name, r in rep.results.items():
                    for sid, (rmse, n) in r.per_station.items():
                        writer.writerow([rep.method, name, sid, repr(rmse), n])


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
