"""Log-space posterior and fractional-power pseudo-posterior over a finite prior.

A single ``kappa`` parameter covers both objects: ``kappa = 1`` is the ordinary
posterior, ``kappa < 1`` raises the likelihood to that power before Bayes'
theorem. Everything sequential is held as log-likelihood sums; likelihood
ratios are never formed multiplicatively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .densities import DensityError, GridDensity, cell_index, divergence_rows
from .priors import FinitePrior

__all__ = [
    "EngineError",
    "InvalidTruthError",
    "DegeneratePosteriorError",
    "MissingTruthError",
    "EmptyRestrictionError",
    "PosteriorState",
    "SubsetMask",
    "MaskTrace",
    "RunTrace",
    "init_state",
    "update",
    "absorb",
    "posterior_weights",
    "log_denominator",
    "predictive_density",
    "posterior_mass",
    "log_posterior_mass",
    "restricted_predictive",
    "log_restricted_numerator",
    "empirical_bayes_reweight",
    "run_trace",
    "snapshot_states",
    "logsumexp_rows",
]


class EngineError(ValueError):
    pass


class InvalidTruthError(EngineError):
    """An observation landed where the registered truth has zero density."""


class DegeneratePosteriorError(EngineError):
    """Every candidate has zero (pseudo-)likelihood."""


class MissingTruthError(EngineError):
    pass


class EmptyRestrictionError(EngineError):
    pass


def _lse(x: np.ndarray) -> float:
    m = np.max(x) if x.size else -np.inf
    if not np.isfinite(m):
        return float(m) if m == np.inf else -math.inf
    return float(m + np.log(np.sum(np.exp(x - m))))


def logsumexp_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a 2-D array; rows that are all -inf give -inf."""
    m = np.max(x, axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.sum(np.exp(x - safe[:, None]), axis=1))


@dataclass(frozen=True)
class SubsetMask:
    included: np.ndarray

    def __post_init__(self):
        inc = np.array(self.included, dtype=bool)
        if inc.ndim != 1:
            raise EngineError("a subset mask is a 1-D boolean vector")
        inc.setflags(write=False)
        object.__setattr__(self, "included", inc)

    @classmethod
    def everything(cls, m: int) -> "SubsetMask":
        return cls(np.ones(m, dtype=bool))

    @classmethod
    def nothing(cls, m: int) -> "SubsetMask":
        return cls(np.zeros(m, dtype=bool))

    @classmethod
    def of(cls, m: int, indices) -> "SubsetMask":
        inc = np.zeros(m, dtype=bool)
        inc[list(indices)] = True
        return cls(inc)

    @property
    def empty(self) -> bool:
        return not self.included.any()

    def __or__(self, other: "SubsetMask") -> "SubsetMask":
        return SubsetMask(self.included | other.included)

    def __and__(self, other: "SubsetMask") -> "SubsetMask":
        return SubsetMask(self.included & other.included)

    def __len__(self):
        return self.included.shape[0]


@dataclass(frozen=True, eq=False)
class PosteriorState:
    prior: FinitePrior
    kappa: float
    n: int
    log_lik: np.ndarray = field(repr=False)
    log_lik_star: float | None = None
    fstar: GridDensity | None = field(default=None, repr=False)

    def scores(self) -> np.ndarray:
        """Unnormalized log posterior weights ``log pi_j + kappa * loglik_j``."""
        with np.errstate(invalid="ignore"):
            s = self.prior.log_weights + self.kappa * self.log_lik
        # -inf weight times -inf likelihood is still an excluded candidate
        return np.where(np.isnan(s), -np.inf, s)

    def ratio_scores(self) -> np.ndarray:
        """``log pi_j + kappa * log R_n(f_j)``, the summands of ``log I_n``."""
        if self.fstar is None:
            raise MissingTruthError("the truth is not registered on this state")
        with np.errstate(invalid="ignore"):
            s = self.prior.log_weights + self.kappa * (self.log_lik - self.log_lik_star)
        return np.where(np.isnan(s), -np.inf, s)


def _check_mask(state: PosteriorState, mask: SubsetMask):
    if len(mask) != len(state.prior):
        raise EngineError(f"mask has length {len(mask)}, prior has {len(state.prior)} candidates")


def init_state(prior: FinitePrior, kappa: float = 1.0, fstar: GridDensity | None = None) -> PosteriorState:
    if not 0 < kappa <= 1:
        raise EngineError(f"kappa must lie in (0, 1], got {kappa}")
    if fstar is not None and fstar.grid != prior.grid:
        raise DensityError("truth and prior live on different grids")
    return PosteriorState(
        prior=prior,
        kappa=float(kappa),
        n=0,
        log_lik=np.zeros(len(prior)),
        log_lik_star=0.0 if fstar is not None else None,
        fstar=fstar,
    )


def update(state: PosteriorState, y: float) -> PosteriorState:
    b = cell_index(state.prior.grid, y)
    star = state.log_lik_star
    if state.fstar is not None:
        if state.fstar.mass[b] == 0:
            raise InvalidTruthError(f"truth has zero density at y={y}")
        star = star + math.log(state.fstar.mass[b] / state.prior.grid.width)
    return replace(state, n=state.n + 1, log_lik=state.log_lik + state.prior.log_values[:, b], log_lik_star=star)


def _loglik_from_counts(log_values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    # 0 * (-inf) must count as 0: an empty cell nobody visited costs nothing
    used = counts > 0
    return (log_values[:, used] * counts[used]).sum(axis=1)


def absorb(state: PosteriorState, ys: Sequence[float]) -> PosteriorState:
    """Absorb a batch of observations; equivalent to repeated :func:`update`."""
    ys = np.asarray(ys, dtype=float)
    if ys.size == 0:
        return state
    grid = state.prior.grid
    counts = np.bincount(cell_index(grid, ys), minlength=grid.bins)
    star = state.log_lik_star
    if state.fstar is not None:
        if np.any(state.fstar.mass[counts > 0] == 0):
            raise InvalidTruthError("an observation falls where the truth has zero density")
        with np.errstate(divide="ignore"):
            star_values = np.log(state.fstar.mass / grid.width)
        star = star + _loglik_from_counts(star_values[None, :], counts)[0]
    return replace(
        state,
        n=state.n + ys.size,
        log_lik=state.log_lik + _loglik_from_counts(state.prior.log_values, counts),
        log_lik_star=star,
    )


def posterior_weights(state: PosteriorState) -> np.ndarray:
    if state.n == 0:
        return state.prior.weights
    s = state.scores()
    z = _lse(s)
    if z == -math.inf:
        raise DegeneratePosteriorError("every candidate has been annihilated by the data")
    w = np.exp(s - z)
    return w / w.sum()


def log_denominator(state: PosteriorState) -> float:
    """``log I_n``: log prior-expected likelihood ratio against the truth (0 at n = 0)."""
    s = state.ratio_scores()
    if state.n == 0:
        return 0.0
    return _lse(s)


def predictive_density(state: PosteriorState) -> GridDensity:
    w = posterior_weights(state)
    mass = w @ state.prior.masses
    return GridDensity(state.prior.grid, mass / mass.sum())


def posterior_mass(state: PosteriorState, mask: SubsetMask) -> float:
    _check_mask(state, mask)
    if mask.empty:
        return 0.0
    w = posterior_weights(state)
    return float(min(1.0, w[mask.included].sum()))


def log_posterior_mass(state: PosteriorState, mask: SubsetMask) -> float:
    """Log posterior mass of ``mask``, exact even when the mass underflows."""
    _check_mask(state, mask)
    s = state.scores()
    z = _lse(s)
    if z == -math.inf:
        raise DegeneratePosteriorError("every candidate has been annihilated by the data")
    return _lse(s[mask.included]) - z


def restricted_predictive(state: PosteriorState, mask: SubsetMask) -> GridDensity:
    _check_mask(state, mask)
    s = state.scores()[mask.included]
    z = _lse(s)
    if mask.empty or z == -math.inf:
        raise EmptyRestrictionError("the mask carries zero posterior mass")
    w = np.exp(s - z)
    mass = (w / w.sum()) @ state.prior.masses[mask.included]
    return GridDensity(state.prior.grid, mass / mass.sum())


def log_restricted_numerator(state: PosteriorState, mask: SubsetMask) -> float:
    """``log L_{n,i}`` for the mask at the state's current sample size; -inf for an empty mask."""
    _check_mask(state, mask)
    return _lse(state.ratio_scores()[mask.included])


def empirical_bayes_reweight(prior: FinitePrior, data_log_lik, kappa: float = 0.5) -> FinitePrior:
    """Data-dependent prior ``Gamma_n`` proportional to ``L_n(f)**(kappa - 1) * Pi(df)``.

    The ordinary posterior under the returned prior equals the ``kappa``-power
    pseudo-posterior under ``prior``. Candidates with zero likelihood get weight 0.
    """
    if not 0 < kappa <= 1:
        raise EngineError(f"kappa must lie in (0, 1], got {kappa}")
    ll = np.asarray(data_log_lik, dtype=float)
    if ll.shape != (len(prior),):
        raise EngineError(f"need {len(prior)} log-likelihoods, got shape {ll.shape}")
    alive = np.isfinite(ll) & np.isfinite(prior.log_weights)
    if not alive.any():
        raise DegeneratePosteriorError("no candidate keeps positive reweighted mass")
    lw = np.full(len(prior), -np.inf)
    lw[alive] = prior.log_weights[alive] + (kappa - 1.0) * ll[alive]
    lw -= _lse(lw)
    return FinitePrior(prior.candidates, lw, prior.levels)


# --------------------------------------------------------------------------
# vectorized whole-run traces


@dataclass
class MaskTrace:
    """Per-step quantities of one registered mask; index ``i`` refers to ``i`` observations."""

    log_l: np.ndarray
    pred_kl: np.ndarray | None = None
    pred_h: np.ndarray | None = None
    log_pred_obs: np.ndarray | None = None
    predictives: np.ndarray | None = None


@dataclass
class RunTrace:
    """Sequential record of one run.

    ``log_i[i]`` is ``log I_i`` (``log_i[0] == 0``); ``pred_*[i]`` describe the predictive
    after ``i`` observations, so ``pred_kl[i - 1]`` is ``K(f*, f_hat_{i-1})``.
    ``log_pred_obs[i - 1]`` is ``log f_hat_{i-1}(Y_i)`` from the predictive masses and
    ``log_star_obs[i - 1]`` is ``log f*(Y_i)``.
    """

    kappa: float
    y: np.ndarray
    cells: np.ndarray
    log_i: np.ndarray
    pred_kl: np.ndarray
    pred_v: np.ndarray
    pred_h: np.ndarray
    log_pred_obs: np.ndarray
    log_star_obs: np.ndarray
    predictives: np.ndarray | None = None
    masks: dict[str, MaskTrace] = field(default_factory=dict)
    states: dict[int, PosteriorState] = field(default_factory=dict)
    degenerate: bool = False

    @property
    def n(self) -> int:
        return self.y.shape[0]


def _mixture_rows(weights: np.ndarray, masses: np.ndarray) -> np.ndarray:
    pred = weights @ masses
    return pred / pred.sum(axis=1, keepdims=True)


def _obs_log_density(pred: np.ndarray, cells: np.ndarray, width: float) -> np.ndarray:
    n = cells.shape[0]
    with np.errstate(divide="ignore"):
        return np.log(pred[np.arange(n), cells]) - math.log(width)


def run_trace(
    prior: FinitePrior,
    fstar: GridDensity,
    ys: Sequence[float],
    kappa: float = 1.0,
    masks: Mapping[str, SubsetMask] | None = None,
    restricted: Sequence[str] | None = None,
    full_predictives: bool = False,
    snapshots: Sequence[int] = (),
) -> RunTrace:
    """Absorb ``ys`` one at a time and record the whole sequence of posterior summaries.

    ``masks`` are tracked through ``log L_{n,i}``; the ones named in ``restricted``
    (default: all) also get restricted-predictive divergences at every step.
    ``snapshots`` lists sample sizes at which the full :class:`PosteriorState` is kept.
    """
    if not 0 < kappa <= 1:
        raise EngineError(f"kappa must lie in (0, 1], got {kappa}")
    if fstar.grid != prior.grid:
        raise DensityError("truth and prior live on different grids")
    grid = prior.grid
    ys = np.asarray(ys, dtype=float)
    cells = cell_index(grid, ys) if ys.size else np.zeros(0, dtype=np.int64)
    cells = np.atleast_1d(cells)
    if np.any(fstar.mass[cells] == 0):
        raise InvalidTruthError("an observation falls where the truth has zero density")
    n = ys.shape[0]
    m = len(prior)
    with np.errstate(divide="ignore"):
        star_values = np.log(fstar.mass) - math.log(grid.width)
    log_star_obs = star_values[cells]

    # cumulative log R_i(f_j), accumulated as ratios to keep magnitudes small
    steps = prior.log_values[:, cells].T - log_star_obs[:, None]
    log_r = np.empty((n + 1, m))
    log_r[0] = 0.0
    np.cumsum(steps, axis=0, out=log_r[1:])
    with np.errstate(invalid="ignore"):
        scores = prior.log_weights[None, :] + kappa * log_r
    scores[np.isnan(scores)] = -np.inf

    log_i = logsumexp_rows(scores)
    log_i[0] = 0.0
    degenerate = bool(np.any(log_i == -np.inf))
    with np.errstate(invalid="ignore"):
        weights = np.exp(scores - log_i[:, None])
    pred = _mixture_rows(weights, prior.masses)
    kl, v, h = divergence_rows(fstar.mass, pred)
    log_pred_obs = _obs_log_density(pred[:-1], cells, grid.width)

    trace = RunTrace(
        kappa=float(kappa),
        y=ys,
        cells=cells,
        log_i=log_i,
        pred_kl=kl,
        pred_v=v,
        pred_h=h,
        log_pred_obs=log_pred_obs,
        log_star_obs=log_star_obs,
        predictives=pred if full_predictives else None,
        degenerate=degenerate,
    )

    masks = dict(masks or {})
    restricted = set(masks if restricted is None else restricted)
    for name, mask in masks.items():
        if len(mask) != m:
            raise EngineError(f"mask {name!r} has length {len(mask)}, prior has {m} candidates")
        if mask.empty:
            trace.masks[name] = MaskTrace(log_l=np.full(n + 1, -np.inf))
            continue
        sub = scores[:, mask.included]
        log_l = logsumexp_rows(sub)
        mt = MaskTrace(log_l=log_l)
        if name in restricted:
            with np.errstate(invalid="ignore"):
                w_a = np.exp(sub - log_l[:, None])
            pred_a = _mixture_rows(w_a, prior.masses[mask.included])
            mt.pred_kl, _, mt.pred_h = divergence_rows(fstar.mass, pred_a)
            mt.log_pred_obs = _obs_log_density(pred_a[:-1], cells, grid.width)
            if full_predictives:
                mt.predictives = pred_a
        trace.masks[name] = mt

    for k in snapshots:
        if not 0 <= k <= n:
            raise EngineError(f"snapshot at n={k} outside 0..{n}")
        trace.states[int(k)] = absorb(init_state(prior, kappa, fstar), ys[:k])
    return trace


def snapshot_states(
    prior: FinitePrior, fstar: GridDensity, ys: Sequence[float], kappa: float, ns: Sequence[int]
) -> dict[int, PosteriorState]:
    """States after the first ``n`` observations for each ``n``, without a per-step trace."""
    ys = np.asarray(ys, dtype=float)
    base = init_state(prior, kappa, fstar)
    return {int(k): absorb(base, ys[:k]) for k in ns}
