"""Gridded daily data model, calendar helpers, and grid/station file I/O."""

from __future__ import annotations

import csv
import datetime as dt
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    DuplicateStationId,
    MalformedRow,
    OutOfExtent,
    OutOfRange,
    Truncated,
    UnknownStation,
)

EPOCH = dt.date(1970, 1, 1)
GRID_MAGIC = b"GRD1"
# magic, W, H, T, start (days since epoch), x0, y0, dx, dy
_GRID_HEADER = struct.Struct("<4sIIIq4d")

SANITY_BOUND_C = 100.0


@dataclass(frozen=True)
class GeoTransform:
    """Planar georeference: (x0, y0) is the north-west corner of pixel (0, 0)."""

    x0: float
    y0: float
    dx: float
    dy: float

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0):
            raise DataError(f"pixel size must be positive, got dx={self.dx}, dy={self.dy}")

    def scaled(self, factor: float) -> "GeoTransform":
        """Same extent origin, pixel size multiplied by ``factor``."""
        return GeoTransform(self.x0, self.y0, self.dx * factor, self.dy * factor)

    def pixel_center(self, row: int, col: int) -> tuple[float, float]:
        return self.x0 + (col + 0.5) * self.dx, self.y0 - (row + 0.5) * self.dy


def pixel_of(transform: GeoTransform, height: int, width: int, x: float, y: float):
    """Return the (row, col) of the cell containing (x, y).

    Cells are closed on the west and north edges, open on the east and south.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise OutOfExtent(f"point ({x}, {y}) is not finite")
    col = math.floor((x - transform.x0) / transform.dx)
    row = math.floor((transform.y0 - y) / transform.dy)
    if not (0 <= row < height and 0 <= col < width):
        raise OutOfExtent(f"point ({x}, {y}) outside the {height}x{width} grid extent")
    return row, col


def days_between(a: dt.date, b: dt.date) -> int:
    return (b - a).days


@dataclass(frozen=True, eq=False)
class DailyGridSeries:
    """T x H x W stack of daily fields in degrees Celsius, NaN = missing."""

    values: np.ndarray
    start_date: dt.date
    transform: GeoTransform
    sanity_bound: float = SANITY_BOUND_C

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 3 or min(values.shape) < 1:
            raise DataError(f"grid series must be a non-empty T x H x W array, got {values.shape}")
        finite = values[np.isfinite(values)]
        if finite.size and (finite.min() <= -self.sanity_bound or finite.max() >= self.sanity_bound):
            raise DataError(
                f"values outside the sanity bound (-{self.sanity_bound}, {self.sanity_bound}) degC"
            )
        if np.isinf(values).any():
            raise DataError("infinite values are not allowed; use NaN for missing data")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if isinstance(self.start_date, dt.datetime):
            object.__setattr__(self, "start_date", self.start_date.date())

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndays(self) -> int:
        return self.values.shape[0]

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=self.ndays - 1)

    def dates(self) -> np.ndarray:
        """Dates of each slice as ``datetime64[D]``."""
        start = np.datetime64(self.start_date, "D")
        return start + np.arange(self.ndays)

    def date_to_index(self, d: dt.date) -> int:
        return date_to_index(self, d)

    def pixel_of(self, x: float, y: float):
        _, h, w = self.values.shape
        return pixel_of(self.transform, h, w, x, y)

    def years(self) -> np.ndarray:
        return self.dates().astype("datetime64[Y]").astype(int) + 1970

    def with_values(self, values, transform=None) -> "DailyGridSeries":
        return DailyGridSeries(values, self.start_date, transform or self.transform, self.sanity_bound)

    def select_years(self, years) -> "DailyGridSeries":
        """Contiguous sub-series covering exactly the given calendar years."""
        years = sorted(set(int(y) for y in years))
        mask = np.isin(self.years(), years)
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            raise OutOfRange(f"series has no days in years {years}")
        if idx[-1] - idx[0] + 1 != idx.size:
            raise OutOfRange(f"years {years} are not contiguous within the series")
        start = self.start_date + dt.timedelta(days=int(idx[0]))
        return DailyGridSeries(self.values[idx[0] : idx[-1] + 1], start, self.transform, self.sanity_bound)

    def __eq__(self, other):
        if not isinstance(other, DailyGridSeries):
            return NotImplemented
        return (
            self.start_date == other.start_date
            and self.transform == other.transform
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


def date_to_index(series: DailyGridSeries, d: dt.date) -> int:
    k = days_between(series.start_date, d)
    if not 0 <= k < series.ndays:
        raise OutOfRange(f"{d} outside series span {series.start_date}..{series.end_date}")
    return k


# ----------------------------------------------------------------------------
# GRD1 binary grid files


def write_grid(series: DailyGridSeries, path) -> None:
    t, h, w = series.values.shape
    tr = series.transform
    header = _GRID_HEADER.pack(
        GRID_MAGIC, w, h, t, days_between(EPOCH, series.start_date), tr.x0, tr.y0, tr.dx, tr.dy
    )
    payload = np.ascontiguousarray(series.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_grid(path) -> DailyGridSeries:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != GRID_MAGIC:
        raise BadMagic(f"expected magic {GRID_MAGIC!r}, found {data[:4]!r}", offset=0)
    if len(data) < _GRID_HEADER.size:
        raise Truncated(_GRID_HEADER.size, len(data), what="grid header")
    _, w, h, t, start, x0, y0, dx, dy = _GRID_HEADER.unpack_from(data)
    expected = _GRID_HEADER.size + 4 * w * h * t
    if len(data) < expected:
        raise Truncated(expected, len(data), what="grid payload")
    if len(data) > expected:
        raise DataError(f"trailing bytes after grid payload at byte offset {expected}")
    if min(w, h, t) == 0:
        raise DataError("grid dimensions must be positive (byte offset 4)")
    values = np.frombuffer(data, dtype="<f4", count=w * h * t, offset=_GRID_HEADER.size)
    values = values.reshape(t, h, w).astype(np.float64)
    return DailyGridSeries(values, EPOCH + dt.timedelta(days=start), GeoTransform(x0, y0, dx, dy))


# ----------------------------------------------------------------------------
# Stations


@dataclass
class Station:
    id: str
    x: float
    y: float
    observations: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DataError(f"station {self.id!r} has non-finite coordinates")


class StationSet:
    """Ordered collection of stations; order defines the evaluation index."""

    def __init__(self, stations=()):
        self.stations = []
        self._by_id = {}
        for st in stations:
            self.add(st)

    def add(self, station: Station):
        if station.id in self._by_id:
            raise DuplicateStationId(f"duplicate station id {station.id!r}")
        self._by_id[station.id] = station
        self.stations.append(station)

    def __len__(self):
        return len(self.stations)

    def __iter__(self):
        return iter(self.stations)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self._by_id[key]
        return self.stations[key]

    def __contains__(self, station_id):
        return station_id in self._by_id

    @property
    def ids(self):
        return [s.id for s in self.stations]


def _check_header(reader, expected, path):
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != expected:
        raise MalformedRow(f"{path}: expected header {','.join(expected)}, got {header}", line=1)


def read_stations(path) -> StationSet:
    out = StationSet()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(reader, ["id", "x", "y"], path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedRow(f"expected 3 fields, got {len(row)}", line=lineno)
            sid = row[0].strip()
            if not sid:
                raise MalformedRow("empty station id", line=lineno)
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise MalformedRow(f"bad coordinates {row[1:]!r}", line=lineno) from None
            try:
                out.add(Station(sid, x, y))
            except DuplicateStationId:
                raise
            except DataError as exc:
                raise MalformedRow(str(exc), line=lineno) from None
    return out


def read_observations(path, stations: StationSet) -> None:
    """Load observation rows into the matching stations (in place)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        _check_header(reader, ["station_id", "date", "value_c"], path)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedRow(f"expected 3 fields, got {len(row)}", line=lineno)
            sid = row[0].strip()
            if sid not in stations:
                raise UnknownStation(f"line {lineno}: unknown station id {sid!r}")
            try:
                day = dt.date.fromisoformat(row[1].strip())
                value = float(row[2])
            except ValueError:
                raise MalformedRow(f"bad date or value {row[1:]!r}", line=lineno) from None
            if math.isnan(value):
                continue
            if not math.isfinite(value):
                raise MalformedRow(f"non-finite value {row[2]!r}", line=lineno)
            stations[sid].observations[day] = value


def write_stations(stations: StationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "x", "y"])
        for st in stations:
            writer.writerow([st.id, repr(float(st.x)), repr(float(st.y))])


def write_observations(stations: StationSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "date", "value_c"])
        for st in stations:
            for day in sorted(st.observations):
                writer.writerow([st.id, day.isoformat(), repr(float(st.observations[day]))])
