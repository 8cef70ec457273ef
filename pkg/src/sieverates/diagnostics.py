"""Martingale constructions and bound reports built from run traces.

Bounds are evaluated on Monte Carlo summaries across replications. Every
:class:`BoundReport` carries ``lhs``, ``rhs`` and ``stderr`` and its
``satisfied`` flag is always ``lhs <= rhs + 4 * stderr``; preconditions that
fail are recorded separately in ``valid`` and ``flags``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .densities import GridDensity, divergence_rows
from .engine import (
    RunTrace,
    SubsetMask,
    absorb,
    init_state,
    log_restricted_numerator,
    logsumexp_rows,
    run_trace,
)
from .priors import EpsilonSequence, FinitePrior, candidate_divergences, epsilon_at

__all__ = [
    "DiagnosticsError",
    "KLMartingaleSeries",
    "HellingerMartingaleArray",
    "BoundReport",
    "kl_martingale",
    "hellinger_martingale",
    "condition1_statistic",
    "cesaro_kl",
    "zero_mean_check",
    "enumerate_outcomes",
    "exact_martingale_means",
    "half_moment_enumeration",
    "lemma1_report",
    "prop1_report",
    "lemma2_report",
    "lemma2_series_ok",
    "prop2_report",
    "hellinger_far_mask",
    "prop3_exact_report",
    "prop3_mc_report",
    "union_report",
]

SE_MULT = 4.0


class DiagnosticsError(ValueError):
    pass


@dataclass
class KLMartingaleSeries:
    x: np.ndarray
    kl_terms: np.ndarray
    partial_sums: np.ndarray
    flagged: bool = False

    @property
    def log_i(self) -> float:
        """``log I_n`` rebuilt from the series."""
        return float(self.partial_sums[-1] - self.kl_terms.sum()) if self.x.size else 0.0


@dataclass
class HellingerMartingaleArray:
    x: np.ndarray
    h_terms: np.ndarray
    root_ratios: np.ndarray
    m_nn: float

    @property
    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.x)


@dataclass
class BoundReport:
    bound: str
    n: int
    lhs: float
    rhs: float
    stderr: float | None = None
    replications: int = 0
    valid: bool = True
    scale: str = "linear"
    flags: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def satisfied(self) -> bool:
        se = self.stderr if self.stderr is not None and math.isfinite(self.stderr) else 0.0
        return bool(self.lhs <= self.rhs + SE_MULT * se)

    @property
    def passed(self) -> bool:
        return self.valid and self.satisfied

    def to_dict(self) -> dict:
        d = asdict(self)
        d["satisfied"] = self.satisfied
        return d


# --------------------------------------------------------------------------
# martingales


def kl_martingale(trace: RunTrace, fstar: GridDensity | None = None, n: int | None = None) -> KLMartingaleSeries:
    """``X_i = log(I_i / I_{i-1}) + K(f*, f_hat_{i-1})`` for ``i = 1..n``."""
    if trace.log_i is None or trace.pred_kl is None:
        raise DiagnosticsError("trace lacks log I_i or predictive divergences")
    if trace.kappa != 1.0:
        raise DiagnosticsError("the KL martingale needs a kappa = 1 trace")
    n = trace.n if n is None else n
    inc = np.diff(trace.log_i[: n + 1])
    kl = trace.pred_kl[:n].copy()
    x = inc + kl
    return KLMartingaleSeries(x=x, kl_terms=kl, partial_sums=np.cumsum(x), flagged=bool(np.any(np.isinf(kl))))


def hellinger_martingale(trace: RunTrace, mask: str, fstar: GridDensity | None = None, n: int | None = None):
    """``X_{n,i} = (L_{n,i}/L_{n,i-1})^{1/2} - 1 + h(f*, f_hat^A_{i-1})`` for a registered mask."""
    mt = trace.masks.get(mask)
    if mt is None or mt.pred_h is None:
        raise DiagnosticsError(f"mask {mask!r} was not traced with restricted predictives")
    if not np.isfinite(mt.log_l[0]):
        raise DiagnosticsError(f"mask {mask!r} has zero prior mass")
    n = trace.n if n is None else n
    root = np.exp(0.5 * np.diff(mt.log_l[: n + 1]))
    h = mt.pred_h[:n].copy()
    x = root - 1.0 + h
    return HellingerMartingaleArray(x=x, h_terms=h, root_ratios=root, m_nn=float(x.sum()))


def condition1_statistic(trace: RunTrace, mask: str, fstar: GridDensity | None = None, beta: float = 0.4, n=None):
    """Mean restricted-predictive Hellinger term and the ``n**-beta`` threshold form."""
    if not 0 < beta < 0.5:
        raise DiagnosticsError("beta must lie in (0, 1/2)")
    mt = trace.masks.get(mask)
    if mt is None or mt.pred_h is None:
        raise DiagnosticsError(f"mask {mask!r} was not traced with restricted predictives")
    n = trace.n if n is None else n
    if n < 1:
        raise DiagnosticsError("need at least one observation")
    return float(np.mean(mt.pred_h[:n])), n ** (-beta)


def cesaro_kl(trace: RunTrace, fstar: GridDensity, ns: Sequence[int]) -> np.ndarray:
    """``K(f*, f_bar_n)`` at each ``n``, with ``f_bar_n`` the mean of ``f_hat_0..f_hat_{n-1}``."""
    if trace.predictives is None:
        raise DiagnosticsError("Cesaro averages need a trace with full predictives")
    csum = np.cumsum(trace.predictives, axis=0)
    rows = np.stack([csum[k - 1] / k for k in ns])
    rows /= rows.sum(axis=1, keepdims=True)
    return divergence_rows(fstar.mass, rows)[0]


def zero_mean_check(x: np.ndarray):
    """Per-step Monte Carlo mean and standard error of an ``(R, n)`` array of increments.

    Returns ``(means, stderrs, ok)`` where ``ok`` requires ``|mean| <= 4 SE`` at every step.
    """
    x = np.asarray(x, dtype=float)
    r = x.shape[0]
    means = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(r) if r > 1 else np.zeros(x.shape[1])
    ok = bool(np.all(np.abs(means) <= SE_MULT * se + 1e-12))
    return means, se, ok


# --------------------------------------------------------------------------
# exhaustive enumeration oracles


def enumerate_outcomes(fstar: GridDensity, n: int, limit: int = 4096):
    """All length-``n`` cell sequences on the truth's support with their probabilities.

    Returns ``(cells, probs, support)``; ``cells`` has shape ``(K**n, n)`` in
    lexicographic order.
    """
    support = np.flatnonzero(fstar.mass > 0)
    k = support.size
    if k**n > limit:
        raise DiagnosticsError(f"{k}**{n} outcomes exceed the enumeration limit {limit}")
    idx = np.array(list(itertools.product(range(k), repeat=n)), dtype=np.int64).reshape(-1, n)
    cells = support[idx]
    probs = np.prod(fstar.mass[cells], axis=1)
    return cells, probs, support


def _midpoints(fstar: GridDensity, cells: np.ndarray) -> np.ndarray:
    g = fstar.grid
    return g.lo + (cells + 0.5) * g.width


def _conditional_mean_error(values: np.ndarray, p_support: np.ndarray, n: int) -> float:
    # values[s, i-1] is X_i on sequence s; X_i only depends on the first i outcomes
    k = p_support.size
    worst = 0.0
    for i in range(1, n + 1):
        cube = values[:, i - 1].reshape((k,) * n)
        cube = cube[(slice(None),) * i + (0,) * (n - i)]
        cond = np.tensordot(cube, p_support, axes=([i - 1], [0]))
        worst = max(worst, float(np.max(np.abs(cond))))
    return worst


def exact_martingale_means(
    prior: FinitePrior,
    fstar: GridDensity,
    n: int,
    masks: Mapping[str, SubsetMask] | None = None,
    limit: int = 4096,
) -> dict[str, float]:
    """Largest absolute conditional mean of each martingale increment, by full enumeration.

    Keys: ``"kl"`` for ``X_i`` and one entry per mask for ``X_{n,i}``.
    """
    cells, probs, support = enumerate_outcomes(fstar, n, limit)
    masks = dict(masks or {})
    ys = _midpoints(fstar, cells)
    kl_x = np.empty(cells.shape)
    h_x = {name: np.empty(cells.shape) for name in masks}
    for s in range(cells.shape[0]):
        tr = run_trace(prior, fstar, ys[s], 1.0, masks=masks)
        kl_x[s] = kl_martingale(tr).x
        for name in masks:
            h_x[name][s] = hellinger_martingale(tr, name).x
    p_support = fstar.mass[support]
    out = {"kl": _conditional_mean_error(kl_x, p_support, n)}
    for name in masks:
        out[name] = _conditional_mean_error(h_x[name], p_support, n)
    return out


def half_moment_enumeration(fstar: GridDensity, f: GridDensity, n: int, limit: int = 4096):
    """``E R_n(f)^{1/2}`` by enumeration through the engine, and the affinity power ``(1-h)^n``."""
    prior = FinitePrior((f,), np.zeros(1))
    cells, probs, _ = enumerate_outcomes(fstar, n, limit)
    ys = _midpoints(fstar, cells)
    base = init_state(prior, 0.5, fstar)
    everything = SubsetMask.everything(1)
    vals = np.array([math.exp(log_restricted_numerator(absorb(base, row), everything)) for row in ys])
    enumerated = float(np.dot(probs, vals))
    _, _, h = divergence_rows(fstar.mass, f.mass)
    return enumerated, float((1.0 - h[0]) ** n)


# --------------------------------------------------------------------------
# bound reports


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size > 1:
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))
    return float(x.mean()), 0.0


def lemma1_report(log_i_samples, C: float, eps_seq: EpsilonSequence, n: int, support_ok: bool = True) -> BoundReport:
    """``-E log I_n <= (C + 1) n eps_n^2``."""
    x = np.asarray(log_i_samples, dtype=float)
    if x.size < 30:
        raise DiagnosticsError(f"lemma 1 needs at least 30 replications, got {x.size}")
    mean, se = _mean_se(x)
    rep = BoundReport("LEMMA1", n, -mean, (C + 1) * n * eps_seq.sq(n), se, x.size, valid=support_ok)
    if not support_ok:
        rep.flags.append("vacuous: support condition fails at this n")
    return rep


def prop1_report(samples, C: float, eps_seq: EpsilonSequence, n: int, which: str = "AVG", fstar=None):
    """Average predictive KL (``AVG``) or Cesaro-average KL (``CESARO``) against ``(C + 1) eps_n^2``.

    ``samples`` is either a sequence of :class:`RunTrace` (full predictives needed for
    ``CESARO``) or an ``(R, 2)`` array of per-replication ``(avg KL, Cesaro KL)``.
    """
    which = which.upper()
    if which not in ("AVG", "CESARO"):
        raise DiagnosticsError(f"unknown predictive KL mode {which!r}")
    if len(samples) and isinstance(samples[0], RunTrace):
        if fstar is None:
            raise DiagnosticsError("pass the truth when reporting from traces")
        pairs = np.array([[np.mean(t.pred_kl[:n]), cesaro_kl(t, fstar, [n])[0]] for t in samples])
    else:
        pairs = np.asarray(samples, dtype=float).reshape(-1, 2)
    avg, ces = pairs[:, 0], pairs[:, 1]
    pathwise_gap = float(np.max(ces - avg))
    col = avg if which == "AVG" else ces
    mean, se = _mean_se(col)
    rep = BoundReport(f"PROP1_{which}", n, mean, (C + 1) * eps_seq.sq(n), se, pairs.shape[0])
    rep.extra["max_pathwise_cesaro_minus_avg"] = pathwise_gap
    if pathwise_gap > 1e-10:
        rep.valid = False
        rep.flags.append("Cesaro KL exceeds average KL on some replication")
    if np.any(np.isinf(col)):
        rep.flags.append("infinite KL term")
    return rep


def lemma2_report(
    log_i_samples, C: float, eps_seq: EpsilonSequence, n: int, c: float, kappa: float = 1.0, slack: float = 0.05
) -> BoundReport:
    """Frequency of ``I_n < exp(-c n eps_n^2)`` against the slack probability."""
    threshold = (C + 1) if kappa == 1.0 else (C + 1) / 2
    if not c > threshold:
        raise DiagnosticsError(f"c = {c} must exceed {threshold} at kappa = {kappa}")
    x = np.asarray(log_i_samples, dtype=float)
    frac = float(np.mean(x < -c * n * eps_seq.sq(n)))
    se = math.sqrt(frac * (1 - frac) / x.size)
    return BoundReport(f"LEMMA2_kappa{kappa:g}", n, frac, slack, se, x.size, extra={"c": c, "kappa": kappa})


def lemma2_series_ok(reports: Sequence[BoundReport]) -> bool:
    """Violation frequency nonincreasing along the grid (within 4 SE) and below slack at the end."""
    for a, b in zip(reports, reports[1:]):
        se = math.hypot(a.stderr or 0.0, b.stderr or 0.0)
        if b.lhs > a.lhs + SE_MULT * se:
            return False
    return bool(reports) and reports[-1].lhs <= reports[-1].rhs


def prop2_report(
    log_ratio_by_n: Mapping[int, Sequence[float]],
    cond1_by_n: Mapping[int, Sequence[float]],
    C: float,
    eps_seq: EpsilonSequence,
    beta: float,
    D: float,
    cover: float = 0.95,
) -> list[BoundReport]:
    """Decay of ``Pi_n(A_n) / Pi(A_n)`` against ``n delta_n^2``, ``delta_n^2 = min(n^-beta, eps_n^2)``.

    All values are on the log scale. Per-n rows compare the median log ratio with 0
    (mass has not grown); the final ``PROP2_FIT`` row has ``lhs = -(CI lower bound of the
    fitted decay exponent)`` and ``rhs = 0``.
    """
    if not 0 < beta < 0.5:
        raise DiagnosticsError("beta must lie in (0, 1/2)")
    ns = sorted(log_ratio_by_n)
    xs, ys, reports = [], [], []
    precondition = True
    for n in ns:
        lr = np.asarray(log_ratio_by_n[n], dtype=float)
        stat = np.asarray(cond1_by_n[n], dtype=float)
        frac = float(np.mean(stat >= D * n ** (-beta)))
        delta_sq = min(n ** (-beta), eps_seq.sq(n))
        ok = frac >= cover and D > (C + 1) / 2
        precondition &= ok
        rep = BoundReport(
            "PROP2", n, float(np.median(lr)), 0.0, None, lr.size, valid=ok, scale="log",
            extra={"delta_sq": delta_sq, "condition1_fraction": frac, "D": D, "beta": beta},
        )
        if not ok:
            rep.flags.append("precondition failed: condition on restricted predictives")
        reports.append(rep)
        finite = np.isfinite(lr)
        xs.append(np.full(finite.sum(), n * delta_sq))
        ys.append(lr[finite])
    x, y = np.concatenate(xs), np.concatenate(ys)
    if x.size < 3 or np.ptp(x) == 0:
        raise DiagnosticsError("need at least two distinct n with finite log ratios to fit a decay")
    fit = stats.linregress(x, y)
    kappa_hat = -fit.slope
    tcrit = stats.t.ppf(0.975, x.size - 2)
    lo, hi = kappa_hat - tcrit * fit.stderr, kappa_hat + tcrit * fit.stderr
    for rep in reports:
        rep.extra["fitted_log_ratio"] = fit.intercept - kappa_hat * rep.n * rep.extra["delta_sq"]
        # exponent the median ratio itself supports at this n
        rep.extra["implied_kappa"] = -rep.lhs / (rep.n * rep.extra["delta_sq"])
    fit_rep = BoundReport(
        "PROP2_FIT", ns[-1], -lo, 0.0, None, min(len(log_ratio_by_n[n]) for n in ns), valid=precondition,
        extra={"kappa_hat": kappa_hat, "ci_low": lo, "ci_high": hi, "intercept": fit.intercept},
    )
    if not precondition:
        fit_rep.flags.append("precondition failed at some n")
    return reports + [fit_rep]


def hellinger_far_mask(prior: FinitePrior, fstar: GridDensity, radius: float) -> SubsetMask:
    """Candidates at Hellinger distance ``H = sqrt(2h)`` strictly above ``radius``."""
    _, _, h = candidate_divergences(prior, fstar)
    return SubsetMask(np.sqrt(2.0 * h) > radius)


def prop3_exact_report(
    prior: FinitePrior, fstar: GridDensity, eps_seq: EpsilonSequence, C: float, M: float, ns: Sequence[int]
) -> list[BoundReport]:
    """Closed form ``E U_n = sum_{A_n} pi_j (1 - h_j)^n`` against ``exp(-M^2 n eps_n^2)``, in logs.

    ``extra["half_exponent_rhs"]`` also records ``-M^2 n eps_n^2 / 2``, the exponent that
    ``(1 - h)^n <= exp(-n h)`` with ``h = H^2 / 2`` guarantees.
    """
    if not M * M > (C + 1) / 2:
        raise DiagnosticsError(f"M^2 = {M * M} must exceed (C + 1)/2 = {(C + 1) / 2}")
    _, _, h = candidate_divergences(prior, fstar)
    with np.errstate(divide="ignore"):
        log_aff = np.log1p(-h)
    out = []
    for n in ns:
        eps = epsilon_at(eps_seq, n)
        far = np.sqrt(2.0 * h) > M * eps
        if far.any():
            with np.errstate(invalid="ignore"):
                terms = prior.log_weights[far] + n * log_aff[far]
            terms = np.where(np.isnan(terms), -np.inf, terms)
            log_eu = float(logsumexp_rows(terms[None, :])[0])
        else:
            log_eu = -math.inf
        rhs = -M * M * n * eps * eps
        out.append(
            BoundReport(
                "PROP3_EXACT", n, log_eu, rhs, 0.0, 0, scale="log",
                extra={"set_size": int(far.sum()), "half_exponent_rhs": rhs / 2, "half_exponent_ok": log_eu <= rhs / 2},
            )
        )
    return out


def prop3_mc_report(mass_by_n: Mapping[int, Sequence[float]], prior_mass_by_n: Mapping[int, float], kappa: float):
    """Monte Carlo mean of the pseudo-posterior mass of ``A_n`` along the grid.

    Row ``k`` has ``rhs`` equal to the previous row's mean (prior mass of ``A_n`` for the
    first row), so ``satisfied`` means the mean did not grow.
    """
    ns = sorted(mass_by_n)
    out = []
    prev = None
    for n in ns:
        x = np.asarray(mass_by_n[n], dtype=float)
        mean, se = _mean_se(x)
        rhs = prior_mass_by_n[n] if prev is None else prev
        out.append(
            BoundReport(f"PROP3_MC_kappa{kappa:g}", n, mean, rhs, 0.0, x.size,
                        extra={"kappa": kappa, "mc_stderr": se, "prior_mass": prior_mass_by_n[n]})
        )
        prev = mean
    strictly = all(b.lhs < a.lhs for a, b in zip(out, out[1:]))
    for r in out:
        r.extra["strictly_decreasing"] = strictly
    return out


def union_report(union_mass, part_masses, n: int) -> BoundReport:
    """Posterior mass of a union of ``J`` sets against the sum of the parts.

    ``union_mass`` has shape ``(R,)``, ``part_masses`` ``(R, J)``.
    """
    u = np.asarray(union_mass, dtype=float)
    parts = np.asarray(part_masses, dtype=float)
    if parts.ndim != 2 or parts.shape[1] < 2 or parts.shape[0] != u.size:
        raise DiagnosticsError("union report needs J >= 2 parts per replication")
    total = parts.sum(axis=1)
    mean_u, _ = _mean_se(u)
    _, se = _mean_se(total - u)
    rep = BoundReport("UNION", n, mean_u, float(total.mean()), se, u.size)
    rep.extra["max_pathwise_excess"] = float(np.max(u - total))
    rep.extra["J"] = int(parts.shape[1])
    if rep.extra["max_pathwise_excess"] > 1e-12:
        rep.valid = False
        rep.flags.append("pathwise subadditivity violated")
    return rep
