"""Finite histogram sieve priors and local prior-support checks."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import comb, logsumexp

from .densities import DensityError, Grid, GridDensity, divergence_rows

__all__ = [
    "FinitePrior",
    "EpsilonSequence",
    "SupportCheckResult",
    "Variant",
    "PriorError",
    "build_histogram_sieve",
    "lattice_size",
    "neighborhood_mass",
    "check_support_condition",
    "epsilon_at",
    "dump_prior",
    "load_prior",
]

DEFAULT_MAX_PER_LEVEL = 5000


class PriorError(ValueError):
    pass


class Variant(str, enum.Enum):
    KL_ONLY = "KL_ONLY"
    KL_AND_V = "KL_AND_V"


@dataclass(frozen=True, eq=False)
class FinitePrior:
    candidates: tuple[GridDensity, ...]
    log_weights: np.ndarray = field(repr=False)
    levels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        cands = tuple(self.candidates)
        if len(cands) == 0:
            raise PriorError("a prior needs at least one candidate")
        grid = cands[0].grid
        if any(c.grid != grid for c in cands):
            raise PriorError("all candidates must share one grid")
        lw = np.array(self.log_weights, dtype=float)
        if lw.shape != (len(cands),):
            raise PriorError(f"need {len(cands)} log-weights, got shape {lw.shape}")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise PriorError("log-weights must not be NaN or +inf")
        total = np.exp(lw).sum()
        if abs(total - 1.0) > 1e-10:
            raise PriorError(f"prior weights sum to {total!r}, not 1")
        lw.setflags(write=False)
        object.__setattr__(self, "candidates", cands)
        object.__setattr__(self, "log_weights", lw)
        masses = np.stack([c.mass for c in cands])
        masses.setflags(write=False)
        object.__setattr__(self, "_masses", masses)

    @classmethod
    def from_masses(cls, grid: Grid, masses, weights=None, log_weights=None) -> "FinitePrior":
        masses = np.atleast_2d(np.asarray(masses, dtype=float))
        if log_weights is None:
            if weights is None:
                weights = np.full(masses.shape[0], 1.0 / masses.shape[0])
            weights = np.asarray(weights, dtype=float)
            with np.errstate(divide="ignore"):
                log_weights = np.log(weights / weights.sum())
        return cls(tuple(GridDensity(grid, m) for m in masses), log_weights)

    @property
    def grid(self) -> Grid:
        return self.candidates[0].grid

    @property
    def masses(self) -> np.ndarray:
        """Candidate mass vectors stacked as an ``(M, B)`` array."""
        return self._masses

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @cached_property
    def log_values(self) -> np.ndarray:
        """``(M, B)`` array of log density values per candidate and cell (-inf on empty cells)."""
        with np.errstate(divide="ignore"):
            out = np.log(self.masses) - math.log(self.grid.width)
        out.setflags(write=False)
        return out

    def __len__(self):
        return len(self.candidates)


@dataclass(frozen=True)
class EpsilonSequence:
    """Rate sequence ``eps_n = amp * n**(-gamma) * log(n + 1)**logpow``."""

    amp: float = 1.0
    gamma: float = 0.5
    logpow: float = 1.0

    def __post_init__(self):
        if not self.amp > 0:
            raise PriorError("epsilon amp must be positive")
        if not 0 < self.gamma <= 0.5:
            raise PriorError("epsilon gamma must lie in (0, 1/2]")
        if self.logpow < 0:
            raise PriorError("epsilon logpow must be nonnegative")
        if self.gamma == 0.5 and self.logpow == 0:
            raise PriorError(
                "gamma = 1/2 with logpow = 0 violates n * eps_n^2 -> infinity; "
                "use gamma < 1/2 or logpow > 0"
            )

    def at(self, n) -> float:
        return epsilon_at(self, n)

    def sq(self, n) -> float:
        return epsilon_at(self, n) ** 2


@dataclass(frozen=True)
class SupportCheckResult:
    n: int
    eps_sq: float
    neighborhood_mass: float
    required_mass: float
    satisfied: bool
    log_margin: float


def epsilon_at(eps: EpsilonSequence, n) -> float:
    if n < 1:
        raise PriorError(f"n must be >= 1, got {n}")
    return eps.amp * n ** (-eps.gamma) * math.log(n + 1) ** eps.logpow


def lattice_size(resolution: int) -> int:
    """Number of compositions of ``resolution**2`` into ``resolution`` nonnegative parts."""
    r = resolution
    return int(comb(r * r + r - 1, r - 1, exact=True))


def _unrank_combination(rank: int, n: int, k: int) -> list[int]:
    # lexicographic unranking in the combinatorial number system
    out = []
    x = 0
    for i in range(k):
        while True:
            c = math.comb(n - x - 1, k - i - 1)
            if rank < c:
                break
            rank -= c
            x += 1
        out.append(x)
        x += 1
    return out


def _composition(rank: int, total: int, parts: int) -> np.ndarray:
    bars = _unrank_combination(rank, total + parts - 1, parts - 1)
    edges = np.array([-1, *bars, total + parts - 1])
    return np.diff(edges) - 1


def _level_masses(bins: int, resolution: int, cap: int) -> np.ndarray:
    r = resolution
    total = r * r
    size = lattice_size(r)
    if size <= cap:
        ranks: Iterable[int] = range(size)
    else:
        ranks = (t * size // cap for t in range(cap))
    width = bins // r
    rows = []
    for rank in ranks:
        counts = _composition(rank, total, r)
        rows.append(np.repeat(counts / total / width, width))
    return np.array(rows)


def build_histogram_sieve(
    grid: Grid,
    levels: Sequence[int],
    level_decay: float = 0.5,
    max_candidates_per_level: int = DEFAULT_MAX_PER_LEVEL,
) -> FinitePrior:
    """Histogram sieve: level ``l`` holds every density constant on ``levels[l]`` super-cells
    with super-cell masses on the simplex lattice of mesh ``1/levels[l]**2``.

    Level ``l`` carries total prior mass proportional to ``level_decay**l``, spread uniformly
    over its candidates. Lattices larger than ``max_candidates_per_level`` are thinned by a
    deterministic rank stride.
    """
    if len(levels) == 0:
        raise PriorError("at least one sieve level is required")
    if not 0 < level_decay < 1:
        raise PriorError(f"level_decay must lie in (0, 1), got {level_decay}")
    if max_candidates_per_level < 1:
        raise PriorError("max_candidates_per_level must be positive")
    blocks, logw, level_ids = [], [], []
    level_mass = np.array([level_decay**l for l in range(len(levels))])
    level_mass /= level_mass.sum()
    for l, r in enumerate(levels):
        if int(r) != r or r < 1 or grid.bins % r:
            raise PriorError(f"resolution {r} does not divide the bin count {grid.bins}")
        masses = _level_masses(grid.bins, int(r), max_candidates_per_level)
        if masses.shape[0] == 0:
            raise PriorError(f"level {l} is empty")
        blocks.append(masses)
        logw.append(np.full(masses.shape[0], math.log(level_mass[l]) - math.log(masses.shape[0])))
        level_ids.append(np.full(masses.shape[0], l))
    masses = np.concatenate(blocks)
    log_weights = np.concatenate(logw)
    log_weights -= logsumexp(log_weights)
    cands = tuple(GridDensity(grid, m) for m in masses)
    return FinitePrior(cands, log_weights, np.concatenate(level_ids))


def _check_grid(prior: FinitePrior, fstar: GridDensity):
    if fstar.grid != prior.grid:
        raise DensityError(f"grid mismatch: prior on {prior.grid}, truth on {fstar.grid}")


def candidate_divergences(prior: FinitePrior, fstar: GridDensity):
    """``(kl, v, h)`` arrays of every candidate from the truth."""
    _check_grid(prior, fstar)
    return divergence_rows(fstar.mass, prior.masses)


def neighborhood_mass(prior: FinitePrior, fstar: GridDensity, eps: float, variant=Variant.KL_ONLY) -> float:
    variant = Variant(variant)
    kl, v, _ = candidate_divergences(prior, fstar)
    thr = eps * eps
    inside = kl <= thr
    if variant is Variant.KL_AND_V:
        inside &= v <= thr
    if not inside.any():
        return 0.0
    return float(min(1.0, np.exp(logsumexp(prior.log_weights[inside]))))


def check_support_condition(
    prior: FinitePrior,
    fstar: GridDensity,
    eps_seq: EpsilonSequence,
    C: float,
    ns: Sequence[int],
    variant=Variant.KL_ONLY,
) -> list[SupportCheckResult]:
    if C <= 0:
        raise PriorError("C must be positive")
    ns = list(ns)
    if any(n < 1 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
        raise PriorError("ns must be strictly increasing integers >= 1")
    out = []
    for n in ns:
        e = epsilon_at(eps_seq, n)
        mass = neighborhood_mass(prior, fstar, e, variant)
        expo = C * n * e * e
        log_margin = math.log(mass) + expo if mass > 0 else -math.inf
        out.append(
            SupportCheckResult(
                n=n,
                eps_sq=e * e,
                neighborhood_mass=mass,
                required_mass=math.exp(-expo),
                satisfied=log_margin >= 0,
                log_margin=log_margin,
            )
        )
    return out


def dump_prior(prior: FinitePrior, path) -> None:
    """Write the prior as JSON; Python float repr keeps every value exact."""
    g = prior.grid
    doc = {
        "format": "sieverates-prior/1",
        "grid": {"lo": g.lo, "hi": g.hi, "bins": g.bins},
        "candidates": [c.mass.tolist() for c in prior.candidates],
        "log_weights": [float(x) for x in prior.log_weights],
    }
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")


def load_prior(path) -> FinitePrior:
    doc = json.loads(Path(path).read_text())
    try:
        grid = Grid(float(doc["grid"]["lo"]), float(doc["grid"]["hi"]), int(doc["grid"]["bins"]))
        cands = tuple(GridDensity(grid, m) for m in doc["candidates"])
        return FinitePrior(cands, np.array(doc["log_weights"], dtype=float))
    except KeyError as exc:
        raise PriorError(f"prior file {path} lacks key {exc}") from None
