"""Experiment orchestration: data generation, replication fan-out, aggregation and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ExperimentConfig, dump_config
from .densities import Grid, GridDensity, normalize, sample
from .diagnostics import (
    BoundReport,
    cesaro_kl,
    exact_martingale_means,
    half_moment_enumeration,
    hellinger_far_mask,
    hellinger_martingale,
    kl_martingale,
    lemma1_report,
    lemma2_report,
    lemma2_series_ok,
    prop1_report,
    prop2_report,
    prop3_exact_report,
    prop3_mc_report,
    union_report,
    zero_mean_check,
)
from .engine import (
    EngineError,
    SubsetMask,
    absorb,
    empirical_bayes_reweight,
    init_state,
    log_denominator,
    posterior_mass,
    posterior_weights,
    run_trace,
    snapshot_states,
)
from .priors import (
    FinitePrior,
    SupportCheckResult,
    Variant,
    build_histogram_sieve,
    candidate_divergences,
    check_support_condition,
    load_prior,
)

log = logging.getLogger(__name__)

__all__ = [
    "Setup",
    "ReplicationResult",
    "RateReport",
    "IdentityResult",
    "prepare",
    "build_truth",
    "build_prior",
    "replication_rng",
    "run_replication",
    "run_experiment",
    "support_table",
    "verify_identities",
    "emit_report",
]

UNRELIABLE_FRACTION = 0.10
# spawn-key offset separating the identity suite's random configurations from replications
_EB_STREAM = 2**40


# --------------------------------------------------------------------------
# setup


@dataclass
class Setup:
    config: ExperimentConfig
    prior: FinitePrior
    fstar: GridDensity
    far_index: int
    mart_mask: SubsetMask
    union_masks: list[SubsetMask]
    prop3_masks: dict[int, SubsetMask]

    @property
    def trace_masks(self) -> dict[str, SubsetMask]:
        return {"mart": self.mart_mask, "far": SubsetMask.of(len(self.prior), [self.far_index])}


def build_truth(cfg: ExperimentConfig) -> GridDensity:
    grid = Grid(cfg.lo, cfg.hi, cfg.bins)
    if cfg.truth_mass is not None:
        return normalize(cfg.truth_mass, grid)
    b = np.arange(cfg.bins, dtype=float)
    raw = {"uniform": np.ones(cfg.bins), "ramp": b + 1, "odd": 2 * b + 1}[cfg.truth_preset]
    return normalize(raw, grid)


def build_prior(cfg: ExperimentConfig) -> FinitePrior:
    if cfg.prior_file is not None:
        prior = load_prior(cfg.prior_file)
        if prior.grid != Grid(cfg.lo, cfg.hi, cfg.bins):
            raise EngineError(f"prior file grid {prior.grid} does not match the config grid")
        return prior
    return build_histogram_sieve(
        Grid(cfg.lo, cfg.hi, cfg.bins), cfg.levels, cfg.level_decay, cfg.max_candidates_per_level
    )


def _union_masks(prior: FinitePrior, fstar: GridDensity, count: int, radius: float, center_h: float):
    """Hellinger balls of ``radius`` around ``count`` distinct candidates whose ``h`` from the
    truth is closest to ``center_h``; centers whose ball would contain the truth are skipped."""
    kl, _, h = candidate_divergences(prior, fstar)
    eligible = np.isfinite(kl) & (np.sqrt(2.0 * h) > radius)
    order = np.argsort(np.where(eligible, np.abs(h - center_h), np.inf), kind="stable")
    centers: list[int] = []
    for j in order:
        if not eligible[j]:
            break
        if all(not np.array_equal(prior.masses[j], prior.masses[c]) for c in centers):
            centers.append(int(j))
        if len(centers) == count:
            break
    if len(centers) < count:
        raise EngineError(f"only {len(centers)} union centers lie farther than radius {radius} from the truth")
    masks = []
    for c in centers:
        _, _, hc = candidate_divergences(prior, prior.candidates[c])
        masks.append(SubsetMask(np.sqrt(2.0 * hc) <= radius))
    return masks


def prepare(cfg: ExperimentConfig) -> Setup:
    prior = build_prior(cfg)
    fstar = build_truth(cfg)
    kl, _, h = candidate_divergences(prior, fstar)
    if cfg.far_candidate is not None:
        if not 0 <= cfg.far_candidate < len(prior):
            raise EngineError(f"far_candidate {cfg.far_candidate} out of range 0..{len(prior) - 1}")
        far = cfg.far_candidate
    else:
        ok = np.isfinite(kl) & np.isfinite(prior.log_weights)
        far = int(np.argmax(np.where(ok, h, -1.0)))
    mart = SubsetMask((h >= cfg.martingale_h_min) & np.isfinite(prior.log_weights))
    eps = cfg.eps_seq
    prop3 = {n: hellinger_far_mask(prior, fstar, cfg.prop3_M * eps.at(n)) for n in cfg.n_grid}
    union: list[SubsetMask] = []
    if {"UNION", "IDENTITIES"} & set(cfg.experiments):
        union = _union_masks(prior, fstar, cfg.union_count, cfg.union_radius, cfg.union_center_h)
    return Setup(cfg, prior, fstar, far, mart, union, prop3)


def replication_rng(master_seed: int, index: int) -> np.random.Generator:
    """Per-replication generator from numpy's ``SeedSequence`` hash of ``(master_seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


# --------------------------------------------------------------------------
# replications


@dataclass
class ReplicationResult:
    index: int
    n: int
    first_y: float
    last_y: float
    flagged: bool = False
    reason: str = ""
    log_i: np.ndarray | None = None
    avg_kl: np.ndarray | None = None
    cesaro_kl: np.ndarray | None = None
    cond1: np.ndarray | None = None
    prop2_log_ratio: np.ndarray | None = None
    union_mass: np.ndarray | None = None
    union_parts: np.ndarray | None = None
    kl_x: np.ndarray | None = None
    h_x: np.ndarray | None = None
    kl_pathwise_err: float = 0.0
    recursion_err: float = 0.0
    recursion_err_restricted: float = 0.0
    pseudo_log_i: dict[float, np.ndarray] = field(default_factory=dict)
    pseudo_mass: dict[float, np.ndarray] = field(default_factory=dict)


def _recursion_errors(trace, mask_name: str) -> tuple[float, float]:
    lhs = np.diff(trace.log_i)
    rhs = trace.log_pred_obs - trace.log_star_obs
    err = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    mt = trace.masks.get(mask_name)
    err_r = 0.0
    if mt is not None and mt.log_pred_obs is not None and np.isfinite(mt.log_l[0]):
        lhs_r = np.diff(mt.log_l)
        rhs_r = mt.log_pred_obs - trace.log_star_obs
        err_r = float(np.max(np.abs(lhs_r - rhs_r))) if lhs_r.size else 0.0
    return err, err_r


def run_replication(cfg: ExperimentConfig, index: int, setup: Setup | None = None) -> ReplicationResult:
    setup = setup or prepare(cfg)
    prior, fstar, grid_ns = setup.prior, setup.fstar, list(cfg.n_grid)
    ys = sample(fstar, replication_rng(cfg.master_seed, index), cfg.n_max)
    res = ReplicationResult(index=index, n=cfg.n_max, first_y=float(ys[0]), last_y=float(ys[-1]))
    try:
        tr = run_trace(
            prior, fstar, ys, 1.0, masks=setup.trace_masks,
            full_predictives=cfg.trace_full_predictives, snapshots=grid_ns,
        )
        if tr.degenerate:
            raise EngineError("posterior became degenerate")
        idx = np.array(grid_ns)
        res.log_i = tr.log_i[idx]
        csum = np.cumsum(tr.pred_kl)
        res.avg_kl = csum[idx - 1] / idx
        if tr.predictives is not None:
            res.cesaro_kl = cesaro_kl(tr, fstar, grid_ns)
        far = tr.masks["far"]
        res.cond1 = np.cumsum(far.pred_h)[idx - 1] / idx
        res.prop2_log_ratio = far.log_l[idx] - tr.log_i[idx] - far.log_l[0]
        if setup.union_masks:
            res.union_mass = np.empty(len(grid_ns))
            res.union_parts = np.empty((len(grid_ns), len(setup.union_masks)))
            union = SubsetMask(np.any([m.included for m in setup.union_masks], axis=0))
            for k, n in enumerate(grid_ns):
                st = tr.states[n]
                res.union_mass[k] = posterior_mass(st, union)
                res.union_parts[k] = [posterior_mass(st, m) for m in setup.union_masks]
        mn = cfg.mart_n
        kls = kl_martingale(tr, n=mn)
        res.kl_x = kls.x
        res.kl_pathwise_err = abs(kls.log_i - tr.log_i[mn])
        if not setup.mart_mask.empty:
            res.h_x = hellinger_martingale(tr, "mart", n=mn).x
        res.recursion_err, res.recursion_err_restricted = _recursion_errors(tr, "mart")
        for kappa in cfg.mc_kappas:
            states = snapshot_states(prior, fstar, ys, kappa, grid_ns)
            res.pseudo_log_i[kappa] = np.array([log_denominator(states[n]) for n in grid_ns])
            res.pseudo_mass[kappa] = np.array([posterior_mass(states[n], setup.prop3_masks[n]) for n in grid_ns])
    except EngineError as exc:
        res.flagged = True
        res.reason = str(exc)
    return res


# --------------------------------------------------------------------------
# identities


@dataclass
class IdentityResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""


def _identity(name, err, tol, detail=""):
    return IdentityResult(name, bool(err <= tol), float(err), tol, detail)


def verify_identities(cfg: ExperimentConfig, setup: Setup | None = None) -> list[IdentityResult]:
    """Exact checks that need no Monte Carlo tolerance."""
    setup = setup or prepare(cfg)
    prior, fstar = setup.prior, setup.fstar
    out: list[IdentityResult] = []

    # predictive recursion, plain and restricted, plus the pathwise KL decomposition
    rec = rec_r = path = 0.0
    add_worst = subadd_worst = 0.0
    union = SubsetMask(np.any([m.included for m in setup.union_masks], axis=0))
    # disjoint blocks covering every candidate, so each part keeps visible mass
    parts = [SubsetMask(np.arange(len(prior)) % 3 == k) for k in range(3)]
    for r in range(cfg.identity_replications):
        ys = sample(fstar, replication_rng(cfg.master_seed, r), cfg.identity_n)
        tr = run_trace(prior, fstar, ys, 1.0, masks={"mart": setup.mart_mask}, snapshots=[cfg.identity_n])
        e, er = _recursion_errors(tr, "mart")
        rec, rec_r = max(rec, e), max(rec_r, er)
        path = max(path, abs(kl_martingale(tr).log_i - tr.log_i[-1]))
        st = tr.states[cfg.identity_n]
        whole = posterior_mass(st, parts[0] | parts[1] | parts[2])
        add_worst = max(add_worst, abs(whole - sum(posterior_mass(st, p) for p in parts)))
        excess = posterior_mass(st, union) - sum(posterior_mass(st, m) for m in setup.union_masks)
        subadd_worst = max(subadd_worst, excess)
    detail = f"{cfg.identity_replications} replications, n={cfg.identity_n}"
    out.append(_identity("recursion", rec, 1e-10, detail))
    out.append(_identity("recursion_restricted", rec_r, 1e-10, detail))
    out.append(_identity("kl_pathwise_decomposition", path, 1e-10, detail))
    out.append(_identity("union_disjoint_additivity", add_worst, 1e-12, detail))
    out.append(_identity("union_subadditivity", max(subadd_worst, 0.0), 1e-12, detail))

    # enumeration over every outcome sequence on the truth's support
    k = int(np.count_nonzero(fstar.mass))
    n_enum = min(cfg.enumeration_n, max(1, int(math.floor(math.log(4096) / math.log(k)))) if k > 1 else cfg.enumeration_n)
    kl, _, h = candidate_divergences(prior, fstar)
    picks = sorted({setup.far_index, 0, len(prior) // 2, len(prior) - 1, int(np.argmin(np.where(h > 0, h, 2.0)))})
    worst = 0.0
    for j in picks:
        for n in range(1, n_enum + 1):
            enum, closed = half_moment_enumeration(fstar, prior.candidates[j], n)
            worst = max(worst, abs(enum - closed))
    out.append(_identity("half_moment", worst, 1e-9, f"candidates {picks}, n<={n_enum}"))
    means = exact_martingale_means(prior, fstar, n_enum, setup.trace_masks)
    out.append(_identity("martingale_exact_kl", means["kl"], 1e-10, f"n={n_enum}"))
    out.append(_identity("martingale_exact_hellinger", max(means["mart"], means["far"]), 1e-10, f"n={n_enum}"))

    # pseudo-posterior equals the ordinary posterior under the data-dependent prior
    rng = replication_rng(cfg.master_seed, _EB_STREAM)
    worst = max(_eb_discrepancy(rng, fstar, 0.5) for _ in range(cfg.eb_configurations))
    out.append(_identity("pseudo_empirical_bayes", worst, 1e-12, f"kappa=0.5, {cfg.eb_configurations} random configurations"))
    worst = max(
        _eb_discrepancy(rng, fstar, kappa) for _ in range(cfg.eb_configurations) for kappa in (0.25, 0.75)
    )
    out.append(_identity("pseudo_empirical_bayes_general", worst, 1e-12, "kappa in {0.25, 0.75}"))
    return out


def _eb_discrepancy(rng: np.random.Generator, fstar: GridDensity, kappa: float) -> float:
    grid = fstar.grid
    m = int(rng.integers(2, 9))
    masses = rng.dirichlet(np.ones(grid.bins), size=m)
    prior = FinitePrior.from_masses(grid, masses, rng.dirichlet(np.ones(m)))
    ys = sample(fstar, rng, int(rng.integers(1, 60)))
    pseudo = absorb(init_state(prior, kappa), ys)
    data_ll = absorb(init_state(prior, 1.0), ys).log_lik
    gamma = empirical_bayes_reweight(prior, data_ll, kappa)
    genuine = absorb(init_state(gamma, 1.0), ys)
    return float(np.max(np.abs(posterior_weights(pseudo) - posterior_weights(genuine))))


def support_table(cfg: ExperimentConfig, setup: Setup | None = None) -> dict[str, list[SupportCheckResult]]:
    setup = setup or prepare(cfg)
    return {
        v.value: check_support_condition(setup.prior, setup.fstar, cfg.eps_seq, cfg.C, cfg.n_grid, v)
        for v in Variant
    }


# --------------------------------------------------------------------------
# experiment


@dataclass
class RateReport:
    config_text: str
    master_seed: int
    experiments: dict[str, list[BoundReport]] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    identities: list[IdentityResult] = field(default_factory=list)
    replications: int = 0
    flagged: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def unreliable(self) -> bool:
        return self.replications > 0 and len(self.flagged) > UNRELIABLE_FRACTION * self.replications

    @property
    def passed(self) -> bool:
        return (
            all(r.passed for reps in self.experiments.values() for r in reps)
            and all(self.checks.values())
            and all(i.passed for i in self.identities)
        )

    def failures(self) -> list[str]:
        out = [f"{r.bound} n={r.n}" for reps in self.experiments.values() for r in reps if not r.passed]
        out += [f"check {k}" for k, v in self.checks.items() if not v]
        out += [f"identity {i.name}" for i in self.identities if not i.passed]
        return out

    def to_summary(self) -> dict:
        return {
            "master_seed": self.master_seed,
            "config": self.config_text,
            "replications": {"requested": self.replications, "flagged": self.flagged, "unreliable": self.unreliable},
            "experiments": {k: [r.to_dict() for r in v] for k, v in self.experiments.items()},
            "checks": self.checks,
            "identities": [vars(i) for i in self.identities],
            "passed": self.passed,
            "metadata": self.metadata,
        }


_WORKER_SETUP: Setup | None = None


def _worker_init(cfg):
    global _WORKER_SETUP
    _WORKER_SETUP = prepare(cfg)


def _worker_run(args):
    cfg, index = args
    return run_replication(cfg, index, _WORKER_SETUP)


def _needs_replications(cfg: ExperimentConfig) -> bool:
    return bool(set(cfg.experiments) & {"LEMMA1", "PROP1", "LEMMA2", "PROP2", "PROP3", "UNION", "MARTINGALE"})


def _run_all(cfg: ExperimentConfig, setup: Setup, jobs: int) -> list[ReplicationResult]:
    indices = range(cfg.replications)
    if jobs <= 1:
        return [run_replication(cfg, i, setup) for i in indices]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(cfg,)) as pool:
        # map preserves index order, so aggregation never depends on completion order
        return list(pool.map(_worker_run, [(cfg, i) for i in indices], chunksize=max(1, cfg.replications // (4 * jobs))))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> RateReport:
    t0 = time.perf_counter()
    setup = prepare(cfg)
    report = RateReport(config_text=dump_config(cfg), master_seed=cfg.master_seed)
    exps = set(cfg.experiments)
    ns = list(cfg.n_grid)
    eps = cfg.eps_seq
    support = support_table(cfg, setup) if exps else {}
    kl_ok = {r.n: r.satisfied for r in support.get("KL_ONLY", [])}
    klv_ok = {r.n: r.satisfied for r in support.get("KL_AND_V", [])}

    if "SUPPORT" in exps:
        for variant, rows in support.items():
            report.experiments[f"SUPPORT_{variant}"] = [
                BoundReport(f"SUPPORT_{variant}", r.n, -math.log(r.neighborhood_mass) if r.neighborhood_mass > 0 else math.inf,
                            cfg.C * r.n * r.eps_sq, 0.0, 0, scale="log", extra={"log_margin": r.log_margin})
                for r in rows
            ]

    if "PROP3" in exps:
        report.experiments["PROP3_EXACT"] = prop3_exact_report(setup.prior, setup.fstar, eps, cfg.C, cfg.prop3_M, ns)
        for r in report.experiments["PROP3_EXACT"]:
            if not klv_ok.get(r.n, False):
                r.flags.append("support condition (K and V) fails at this n")

    results: list[ReplicationResult] = []
    if _needs_replications(cfg):
        results = _run_all(cfg, setup, jobs)
        report.replications = cfg.replications
        report.flagged = [r.index for r in results if r.flagged]
        if report.flagged:
            log.warning("%d replications flagged", len(report.flagged))
    good = [r for r in results if not r.flagged]

    if good:
        _aggregate(report, cfg, setup, good, exps, kl_ok, klv_ok)
    if "IDENTITIES" in exps:
        report.identities = verify_identities(cfg, setup)
    if report.unreliable:
        report.checks["reliable"] = False

    report.metadata = {
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "wall_clock_seconds": time.perf_counter() - t0,
        "versions": {
            "sieverates": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    return report


def _aggregate(report, cfg, setup, good, exps, kl_ok, klv_ok):
    ns = list(cfg.n_grid)
    eps = cfg.eps_seq
    stack = lambda attr: np.array([getattr(r, attr) for r in good])  # noqa: E731

    if "LEMMA1" in exps:
        li = stack("log_i")
        report.experiments["LEMMA1"] = [lemma1_report(li[:, k], cfg.C, eps, n, kl_ok.get(n, False))
                                        for k, n in enumerate(ns)] if len(good) >= 30 else []

    if "PROP1" in exps:
        avg = stack("avg_kl")
        ces = stack("cesaro_kl") if good[0].cesaro_kl is not None else None
        rows_avg, rows_ces = [], []
        for k, n in enumerate(ns):
            pairs = np.column_stack([avg[:, k], ces[:, k] if ces is not None else avg[:, k]])
            rows_avg.append(prop1_report(pairs, cfg.C, eps, n, "AVG"))
            if ces is not None:
                rows_ces.append(prop1_report(pairs, cfg.C, eps, n, "CESARO"))
        report.experiments["PROP1_AVG"] = rows_avg
        if ces is not None:
            report.experiments["PROP1_CESARO"] = rows_ces
            report.checks["prop1_cesaro_below_avg"] = all(
                c.lhs <= a.lhs + 4 * math.hypot(a.stderr, c.stderr) for a, c in zip(rows_avg, rows_ces)
            )

    if "LEMMA2" in exps:
        li = stack("log_i")
        c1 = cfg.C + 1 + cfg.lemma2_offset
        rows = [lemma2_report(li[:, k], cfg.C, eps, n, c1, 1.0, cfg.slack) for k, n in enumerate(ns)]
        half = np.array([r.pseudo_log_i[0.5] for r in good])
        c_half = (cfg.C + 1) / 2 + cfg.lemma2_offset
        rows_half = [lemma2_report(half[:, k], cfg.C, eps, n, c_half, 0.5, cfg.slack) for k, n in enumerate(ns)]
        for r in rows + rows_half:
            if not klv_ok.get(r.n, False):
                r.flags.append("support condition (K and V) fails at this n")
        report.experiments["LEMMA2_kappa1"] = rows
        report.experiments["LEMMA2_kappa0.5"] = rows_half
        report.checks["lemma2_series_kappa1"] = lemma2_series_ok(rows)
        report.checks["lemma2_series_kappa0.5"] = lemma2_series_ok(rows_half)

    if "PROP2" in exps:
        lr = stack("prop2_log_ratio")
        c1 = stack("cond1")
        report.experiments["PROP2"] = prop2_report(
            {n: lr[:, k] for k, n in enumerate(ns)}, {n: c1[:, k] for k, n in enumerate(ns)},
            cfg.C, eps, cfg.beta, cfg.D,
        )

    if "PROP3" in exps:
        prior_mass = {n: float(np.exp(setup.prior.log_weights[setup.prop3_masks[n].included]).sum()) for n in ns}
        for kappa in cfg.kappas:
            mass = np.array([r.pseudo_mass[kappa] for r in good])
            rows = prop3_mc_report({n: mass[:, k] for k, n in enumerate(ns)}, prior_mass, kappa)
            report.experiments[f"PROP3_MC_kappa{kappa:g}"] = rows
            report.checks[f"prop3_mc_strictly_decreasing_kappa{kappa:g}"] = rows[0].extra["strictly_decreasing"]

    if "UNION" in exps:
        um = stack("union_mass")
        up = stack("union_parts")
        rows = [union_report(um[:, k], up[:, k, :], n) for k, n in enumerate(ns)]
        report.experiments["UNION"] = rows
        report.checks["union_joint_decay"] = all(b.rhs <= a.rhs for a, b in zip(rows, rows[1:]))

    if "MARTINGALE" in exps:
        mn = cfg.mart_n
        r_count = len(good)
        rows = []
        kx = stack("kl_x")
        means, se, _ = zero_mean_check(kx)
        rows.append(BoundReport("MARTINGALE_KL_MEAN", mn, float(np.max(np.abs(means) - 4 * se)), 0.0, 0.0, r_count,
                                extra={"max_abs_mean": float(np.max(np.abs(means)))}))
        if good[0].h_x is not None:
            hx = stack("h_x")
            means, se, _ = zero_mean_check(hx)
            rows.append(BoundReport("MARTINGALE_H_MEAN", mn, float(np.max(np.abs(means) - 4 * se)), 0.0, 0.0, r_count,
                                    extra={"max_abs_mean": float(np.max(np.abs(means)))}))
            m_nn = hx.sum(axis=1)
            rows.append(BoundReport("MARTINGALE_H_SECOND_MOMENT", mn, float(np.mean(m_nn**2)),
                                    2 * mn * (1 + 4 / math.sqrt(r_count)), 0.0, r_count))
        rows.append(BoundReport("KL_PATHWISE_DECOMPOSITION", mn, float(max(r.kl_pathwise_err for r in good)), 1e-10,
                                0.0, r_count))
        rows.append(BoundReport("RECURSION_IDENTITY", cfg.n_max,
                                float(max(max(r.recursion_err, r.recursion_err_restricted) for r in good)), 1e-10,
                                0.0, r_count))
        report.experiments["MARTINGALE"] = rows


# --------------------------------------------------------------------------
# output


def _clean(obj):
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, (np.floating,)):
        return _clean(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _g17(x) -> str:
    return format(float(x), ".17g")


def summary_json(report: RateReport) -> str:
    return json.dumps(_clean(report.to_summary()), indent=2, sort_keys=True) + "\n"


def emit_report(report: RateReport, out_dir) -> list[Path]:
    """Write ``config.echo``, ``summary.json``, one CSV per report series and ``identities.log``.

    Files are staged in a temporary directory and moved into place; on failure nothing
    from this call is left behind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {"config.echo": report.config_text, "summary.json": summary_json(report)}
    for name, rows in report.experiments.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "lhs", "rhs", "stderr", "satisfied", "replications"])
        for r in rows:
            w.writerow([r.n, _g17(r.lhs), _g17(r.rhs), "" if r.stderr is None else _g17(r.stderr),
                        "true" if r.satisfied else "false", r.replications])
        files[f"{name}.csv"] = buf.getvalue()
    if report.identities:
        files["identities.log"] = "".join(
            f"{'PASS' if i.passed else 'FAIL'} {i.name} max_error={_g17(i.max_error)} tol={i.tolerance:g} {i.detail}\n"
            for i in report.identities
        )
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    moved: list[Path] = []
    try:
        for name, text in files.items():
            with open(staging / name, "w", newline="") as fh:
                fh.write(text)
        for name in files:
            dest = out_dir / name
            os.replace(staging / name, dest)
            moved.append(dest)
    except BaseException:
        for p in moved:
            p.unlink(missing_ok=True)
        raise
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    return moved

