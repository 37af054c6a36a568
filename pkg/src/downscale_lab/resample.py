"""Separable raster resampling: coarsening and interpolation baselines.

All kernels use a center-aligned coordinate mapping and edge replication.
Sample positions are computed as exact rationals, so phases that land on an
input sample are exactly zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NaNInput, NonDivisibleFactor
from .grid import DailyGridSeries


class KernelKind(str, enum.Enum):
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"  # Keys, a = -0.5
    CUBIC_SPLINE = "cubic_spline"  # uniform cubic B-spline (approximating)

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        aliases = {"bicubic_keys": "bicubic", "cubicspline": "cubic_spline", "bspline": "cubic_spline"}
        value = str(value).lower()
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ConfigError(f"unknown kernel {value!r}") from None


class Direction(str, enum.Enum):
    COARSEN = "coarsen"
    REFINE = "refine"


KEYS_A = -0.5


@dataclass(frozen=True)
class ResamplePlan:
    kind: KernelKind
    factor: int
    direction: Direction

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind.parse(self.kind))
        object.__setattr__(self, "direction", Direction(self.direction))
        if int(self.factor) != self.factor or self.factor < 2:
            raise ConfigError(f"resampling factor must be an integer >= 2, got {self.factor}")
        object.__setattr__(self, "factor", int(self.factor))


def _keys(x):
    a = KEYS_A
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def _bspline3(x):
    x = np.abs(x)
    return np.where(x < 1, (4 - 6 * x**2 + 3 * x**3) / 6, np.where(x < 2, (2 - x) ** 3 / 6, 0.0))


def _offsets(kind: KernelKind) -> np.ndarray:
    return np.array([0, 1]) if kind is KernelKind.BILINEAR else np.array([-1, 0, 1, 2])


def kernel_weights(kind, phase):
    """Weights at the integer offsets returned by ``_offsets`` (relative to floor(u)).

    ``phase`` may be a scalar or an array; the weight axis is last.
    """
    kind = KernelKind.parse(kind)
    phase = np.asarray(phase, dtype=np.float64)
    if kind is KernelKind.BILINEAR:
        return np.stack([1.0 - phase, phase], axis=-1)
    dist = phase[..., None] - _offsets(kind)
    if kind is KernelKind.BICUBIC:
        return _keys(dist)
    return _bspline3(dist)


def _matrix(kind: KernelKind, n_in: int, num, den: int) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for positions u = num / den."""
    num = np.asarray(num, dtype=np.int64)
    base = num // den
    phase = (num - base * den) / den
    weights = kernel_weights(kind, phase)
    idx = np.clip(base[:, None] + _offsets(kind), 0, n_in - 1)
    mat = np.zeros((num.size, n_in))
    rows = np.repeat(np.arange(num.size), idx.shape[1])
    np.add.at(mat, (rows, idx.ravel()), weights.ravel())
    return mat


def coarsen_matrix(kind, n_in: int, factor: int) -> np.ndarray:
    # coarse pixel R samples fine coordinate R*f + (f-1)/2
    if n_in % factor:
        raise NonDivisibleFactor(f"factor {factor} does not divide size {n_in}")
    out = np.arange(n_in // factor)
    return _matrix(KernelKind.parse(kind), n_in, 2 * out * factor + factor - 1, 2)


def refine_matrix(kind, n_in: int, factor: int) -> np.ndarray:
    # fine pixel U samples coarse coordinate (U + 0.5)/f - 0.5
    out = np.arange(n_in * factor)
    return _matrix(KernelKind.parse(kind), n_in, 2 * out + 1 - factor, 2 * factor)


def _apply(field, mat_rows, mat_cols):
    # rows first, then columns; works for any number of leading axes
    tmp = np.einsum("rh,...hw->...rw", mat_rows, field)
    return np.einsum("...rw,cw->...rc", tmp, mat_cols)


def coarsen(field, plan: ResamplePlan) -> np.ndarray:
    """Sample each coarse pixel center from the fine field with the plan's kernel.

    ``field`` is ``(..., H, W)``; returns ``(..., H/f, W/f)``.
    """
    if plan.direction is not Direction.COARSEN:
        raise ConfigError("coarsen() requires a Coarsen plan")
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[-2:]
    f = plan.factor
    if h % f or w % f:
        raise NonDivisibleFactor(f"factor {f} does not divide grid size {h}x{w}")
    if np.isnan(field).any():
        raise NaNInput("coarsening input contains NaN")
    return _apply(field, coarsen_matrix(plan.kind, h, f), coarsen_matrix(plan.kind, w, f))


def refine(field, plan: ResamplePlan) -> np.ndarray:
    """Interpolate ``(..., h, w)`` onto a grid ``factor`` times finer."""
    if plan.direction is not Direction.REFINE:
        raise ConfigError("refine() requires a Refine plan")
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[-2:]
    f = plan.factor
    return _apply(field, refine_matrix(plan.kind, h, f), refine_matrix(plan.kind, w, f))


def coarsen_series(series: DailyGridSeries, factor: int, kind=KernelKind.CUBIC_SPLINE) -> DailyGridSeries:
    plan = ResamplePlan(kind, factor, Direction.COARSEN)
    return series.with_values(coarsen(series.values, plan), series.transform.scaled(factor))


def refine_series(series: DailyGridSeries, factor: int, kind=KernelKind.BICUBIC) -> DailyGridSeries:
    plan = ResamplePlan(kind, factor, Direction.REFINE)
    return series.with_values(refine(series.values, plan), series.transform.scaled(1.0 / factor))
