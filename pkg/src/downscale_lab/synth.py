"""Deterministic synthetic climate: HR "observations", coarse "projections", stations.

Random numbers come from numpy's PCG64 generator. Each generator draws from
its own stream, ``PCG64(SeedSequence(seed, spawn_key=(k,)))`` with

    k = 0  pseudo-topography
    k = 1  daily weather noise
    k = 2  station placement and station noise
    k = 3  projection year shuffling

so changing one component never shifts another's numbers.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, CountTooLarge
from .grid import DailyGridSeries, GeoTransform, Station, StationSet
from .resample import KernelKind, coarsen_series

STREAM_TOPOGRAPHY = 0
STREAM_NOISE = 1
STREAM_STATIONS = 2
STREAM_SHUFFLE = 3

TROPICAL_YEAR = 365.2425


def stream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    height: int = 64
    width: int = 64
    start_year: int = 2001
    years: int = 4
    mean_c: float = 9.0
    amplitude_c: float = 9.0
    peak_doy: float = 200.0
    lapse_c: float = 2.0  # std of the topographic term
    topo_length: float = 3.0  # pixels
    noise_std: float = 1.0
    noise_length: float = 2.0  # pixels
    pixel_size: float = 1000.0
    x0: float = 0.0
    y0: float = 0.0
    factor: int = 4
    bias: float = 0.0
    shuffle_years: bool = False
    stations: int = 40
    station_noise: float = 0.0

    def __post_init__(self):
        if self.years < 2:
            raise ConfigError("synthetic data needs at least 2 years")
        if self.height < 1 or self.width < 1:
            raise ConfigError("grid size must be positive")
        if self.factor >= 1 and (self.height % self.factor or self.width % self.factor):
            raise ConfigError(f"grid {self.height}x{self.width} not divisible by factor {self.factor}")

    @property
    def y_top(self) -> float:
        return self.y0 + self.height * self.pixel_size


def _smooth_unit_field(rng, shape, length):
    """White noise smoothed by a periodic Gaussian, rescaled to unit variance.

    The rescaling uses the filter's L2 gain (exact for periodic smoothing), so
    the variance is 1 in expectation, not per draw.
    """
    white = rng.standard_normal(shape)
    if length <= 0:
        return white
    sigma = (0,) * (len(shape) - 2) + (length, length)
    delta = np.zeros(shape[-2:])
    delta[0, 0] = 1.0
    gain = np.sqrt(np.sum(gaussian_filter(delta, (length, length), mode="wrap") ** 2))
    return gaussian_filter(white, sigma, mode="wrap") / gain


def topography_term(cfg: SynthConfig) -> np.ndarray:
    """Static temperature offset from a seeded pseudo-topography (higher = colder)."""
    if cfg.lapse_c == 0:
        return np.zeros((cfg.height, cfg.width))
    elevation = _smooth_unit_field(stream(cfg.seed, STREAM_TOPOGRAPHY), (cfg.height, cfg.width), cfg.topo_length)
    return -cfg.lapse_c * elevation


def synth_hr(cfg: SynthConfig) -> DailyGridSeries:
    start = dt.date(cfg.start_year, 1, 1)
    end = dt.date(cfg.start_year + cfg.years, 1, 1)
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(end, "D"))
    doy = (dates - dates.astype("datetime64[Y]")).astype(int) + 1
    seasonal = cfg.mean_c + cfg.amplitude_c * np.cos(2 * np.pi * (doy - cfg.peak_doy) / TROPICAL_YEAR)
    values = seasonal[:, None, None] + topography_term(cfg)[None]
    if cfg.noise_std > 0:
        noise = _smooth_unit_field(
            stream(cfg.seed, STREAM_NOISE), (dates.size, cfg.height, cfg.width), cfg.noise_length
        )
        values = values + cfg.noise_std * noise
    transform = GeoTransform(cfg.x0, cfg.y_top, cfg.pixel_size, cfg.pixel_size)
    return DailyGridSeries(values, start, transform)


def _year_blocks(series: DailyGridSeries):
    years = series.years()
    out = {}
    for y in np.unique(years):
        idx = np.flatnonzero(years == y)
        out[int(y)] = (idx[0], idx[-1] + 1)
    return out


def synth_projection(hr: DailyGridSeries, factor: int, bias: float = 0.0, shuffle_years: bool = False,
                     seed: int = 0, kernel=KernelKind.CUBIC_SPLINE) -> DailyGridSeries:
    """Coarsened HR plus a constant bias, optionally with years permuted.

    Shuffling permutes whole years among years of equal length (leap with
    leap, common with common) using a derangement when a group has more than
    one member, so daily correspondence with the HR series is destroyed
    while every year's climatology survives intact. Incomplete edge years
    are left in place.
    """
    coarse = coarsen_series(hr, factor, kernel)
    values = np.array(coarse.values) + bias
    if shuffle_years:
        rng = stream(seed, STREAM_SHUFFLE)
        blocks = _year_blocks(coarse)
        groups = {}
        for y, (a, b) in blocks.items():
            full = (dt.date(y + 1, 1, 1) - dt.date(y, 1, 1)).days
            if b - a == full:
                groups.setdefault(b - a, []).append(y)
        source = values.copy()
        for members in groups.values():
            if len(members) < 2:
                continue
            while True:
                perm = rng.permutation(len(members))
                if not np.any(perm == np.arange(len(members))):
                    break
            for dst, src in zip(members, np.asarray(members)[perm]):
                a, b = blocks[dst]
                sa, sb = blocks[int(src)]
                values[a:b] = source[sa:sb]
    return coarse.with_values(values)


def synth_stations(hr: DailyGridSeries, count: int, seed: int = 0, noise: float = 0.0) -> StationSet:
    """Stations at distinct HR pixel centers; observations = pixel series + noise."""
    _, h, w = hr.shape
    if count > h * w:
        raise CountTooLarge(f"cannot place {count} stations on {h * w} pixels")
    rng = stream(seed, STREAM_STATIONS)
    cells = rng.choice(h * w, size=count, replace=False)
    dates = [hr.start_date + dt.timedelta(days=i) for i in range(hr.ndays)]
    stations = StationSet()
    width = max(3, len(str(count)))
    for k, cell in enumerate(cells):
        r, c = divmod(int(cell), w)
        series = np.array(hr.values[:, r, c])
        if noise > 0:
            series = series + noise * rng.standard_normal(series.size)
        x, y = hr.transform.pixel_center(r, c)
        obs = {d: float(v) for d, v in zip(dates, series) if np.isfinite(v)}
        stations.add(Station(f"S{k + 1:0{width}d}", x, y, obs))
    return stations


def synth_all(cfg: SynthConfig):
    """(hr, projection, stations) for a config."""
    hr = synth_hr(cfg)
    proj = synth_projection(hr, cfg.factor, cfg.bias, cfg.shuffle_years, cfg.seed)
    stations = synth_stations(hr, cfg.stations, cfg.seed, cfg.station_noise)
    return hr, proj, stations
