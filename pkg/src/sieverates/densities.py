"""Piecewise-constant densities on a fixed partition of a compact interval.

Every density here is a vector of cell masses on an equal-width grid, so the
Kullback-Leibler divergence, its second moment and the Hellinger affinity are
exact finite sums rather than quadrature approximations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Grid",
    "GridDensity",
    "Divergences",
    "DensityError",
    "normalize",
    "evaluate",
    "cell_index",
    "sample",
    "divergences",
    "divergence_rows",
    "mixture",
    "cesaro_average",
]

MASS_TOL = 1e-12


class DensityError(ValueError):
    """Raised for invalid densities, grids or evaluation points."""


@dataclass(frozen=True)
class Grid:
    lo: float
    hi: float
    bins: int

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or not self.lo < self.hi:
            raise DensityError(f"grid needs finite lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.bins) != self.bins or self.bins < 1:
            raise DensityError(f"grid needs a positive integer bin count, got {self.bins}")
        object.__setattr__(self, "bins", int(self.bins))

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Cell masses on a grid; the density on cell ``b`` is ``mass[b] / width``."""

    grid: Grid
    mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.mass, dtype=float)
        if m.ndim != 1 or m.shape[0] != self.grid.bins:
            raise DensityError(f"mass vector must have length {self.grid.bins}, got shape {m.shape}")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise DensityError("masses must be finite and nonnegative")
        if abs(m.sum() - 1.0) > MASS_TOL:
            raise DensityError(f"masses sum to {m.sum()!r}, not 1")
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    def __eq__(self, other):
        if not isinstance(other, GridDensity):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.mass, other.mass)

    def __hash__(self):
        return hash((self.grid, self.mass.tobytes()))

    def __repr__(self):
        return f"GridDensity(grid={self.grid}, mass={self.mass.tolist()})"

    @property
    def values(self) -> np.ndarray:
        """Density value per cell."""
        return self.mass / self.grid.width


@dataclass(frozen=True)
class Divergences:
    kl: float
    v: float
    h: float
    affinity: float


def normalize(raw: Sequence[float], grid: Grid) -> GridDensity:
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or raw.shape[0] != grid.bins:
        raise DensityError(f"expected {grid.bins} raw weights, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)) or np.any(raw < 0):
        raise DensityError("raw weights must be finite and nonnegative")
    total = raw.sum()
    if total <= 0:
        raise DensityError("raw weights are all zero")
    mass = raw / total
    # one correction pass so the sum is 1 to rounding
    mass = mass / mass.sum()
    return GridDensity(grid, mass)


def cell_index(grid: Grid, y) -> np.ndarray | int:
    """Cell containing ``y``; the right endpoint belongs to the last cell."""
    arr = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < grid.lo) or np.any(arr > grid.hi):
        raise DensityError(f"point(s) outside [{grid.lo}, {grid.hi}]")
    idx = np.floor((arr - grid.lo) / grid.width).astype(np.int64)
    idx = np.minimum(idx, grid.bins - 1)
    if idx.ndim == 0:
        return int(idx)
    return idx


def evaluate(f: GridDensity, y) -> float | np.ndarray:
    idx = cell_index(f.grid, y)
    out = f.mass[idx] / f.grid.width
    return float(out) if np.ndim(out) == 0 else out


def sample(f: GridDensity, rng: np.random.Generator, count: int) -> np.ndarray:
    """Inverse-CDF sampling: pick a cell by cumulative mass, then a uniform point inside it."""
    if int(count) != count or count < 1:
        raise DensityError(f"count must be a positive integer, got {count}")
    grid = f.grid
    cdf = np.cumsum(f.mass)
    cdf[-1] = 1.0
    u = rng.random(count)
    cells = np.searchsorted(cdf, u, side="right")
    cells = np.minimum(cells, grid.bins - 1)
    y = grid.lo + (cells + rng.random(count)) * grid.width
    y = np.clip(y, grid.lo, grid.hi)
    # rounding at cell edges must not move a point into a neighbouring cell
    for _ in range(4):
        bad = cell_index(grid, y) != cells
        if not bad.any():
            break
        left = grid.lo + cells[bad] * grid.width
        right = grid.lo + (cells[bad] + 1) * grid.width
        y[bad] = np.where(y[bad] >= right, np.nextafter(right, left), np.nextafter(left, right))
    return y


def _check_same_grid(*fs: GridDensity) -> Grid:
    grid = fs[0].grid
    for f in fs[1:]:
        if f.grid != grid:
            raise DensityError(f"grid mismatch: {grid} vs {f.grid}")
    return grid


def divergence_rows(p: np.ndarray, q: np.ndarray):
    """Vectorized K, V, h of each row of ``q`` (or the single vector) from ``p``.

    Returns ``(kl, v, h)`` arrays; cells where ``p > 0`` and ``q == 0`` give +inf for
    ``kl`` and ``v``. Uses 0 log 0 = 0.
    """
    p = np.asarray(p, dtype=float)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    pos = p > 0
    pp = p[pos]
    qq = q[:, pos]
    with np.errstate(divide="ignore"):
        lr = np.log(pp) - np.log(qq)
    kl = (pp * lr).sum(axis=1)
    v = (pp * lr**2).sum(axis=1)
    infinite = np.any(qq == 0, axis=1)
    kl[infinite] = np.inf
    v[infinite] = np.inf
    # rounding can push an exact match a hair below zero
    kl = np.maximum(kl, 0.0)
    affinity = np.minimum(np.sqrt(p * q).sum(axis=1), 1.0)
    h = 1.0 - affinity
    return kl, v, h


def divergences(fstar: GridDensity, f: GridDensity) -> Divergences:
    _check_same_grid(fstar, f)
    if np.array_equal(fstar.mass, f.mass):
        return Divergences(kl=0.0, v=0.0, h=0.0, affinity=1.0)
    kl, v, h = divergence_rows(fstar.mass, f.mass)
    h = float(h[0])
    return Divergences(kl=float(kl[0]), v=float(v[0]), h=h, affinity=1.0 - h)


def mixture(fs: Sequence[GridDensity], weights: Sequence[float]) -> GridDensity:
    if len(fs) == 0:
        raise DensityError("mixture of an empty list")
    grid = _check_same_grid(*fs)
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(fs),):
        raise DensityError(f"need {len(fs)} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > MASS_TOL:
        raise DensityError(f"weights must be a probability vector (sum={w.sum()!r})")
    mass = w @ np.stack([f.mass for f in fs])
    return GridDensity(grid, mass / mass.sum())


def cesaro_average(fs: Sequence[GridDensity]) -> GridDensity:
    if len(fs) == 0:
        raise DensityError("Cesaro average of an empty list")
    n = len(fs)
    return mixture(fs, np.full(n, 1.0 / n))
