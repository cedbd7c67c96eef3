"""Importance-sampling model evidence, Bayes factors, and method comparison.

The estimator draws parameters from the defense mixture and trajectories
from one of the chain-wise proposals; averaging the importance weights is
unbiased for the evidence.  Work splits into independent per-parameter
units with their own random streams, so results are reproducible for any
thread count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from ._rng import as_generator, spawn_generators
from .core import (HiddenTrajectories, ObservationGrid, ZeroSupportError,
                   log_sum_exp)
from .iffbs import generate_guiding_samples, initial_trajectory
from .mcmc import DefenseMixture, fit_defense_mixture, mcmc_joint, _rebind
from .proposals import diffbs_propose, miffbs_propose, select_high_posterior
from .sir import SirModel, SirParams, prior_log_density_transformed, untransform

#: Bayes-factor cutoffs against the best model: below the first is close
#: competition, between them weak support, above the second rejection.
BF_SUBSTANTIAL = 3.2
BF_STRONG = 10.0

CATEGORIES = ("best", "substantial-support", "weak-support", "rejected")


@dataclass
class EvidenceConfig:
    n_theta: int = 500
    l_inner: int = None          # default: 1 for miffbs, 100 for diffbs
    n_guiding: int = 1000
    regen_threshold: float = None  # default: n_guiding / 2
    proposal: str = "miffbs"
    burn_in_sweeps: int = 10
    refresh_sweeps: int = 2
    mcmc_iters: int = 10000
    mixture_weight: float = 0.95
    mixture_df: float = None     # Student-t parameter component when set
    diffbs_fresh_reference: bool = False  # new reference per inner replicate
    threads: int = 1

    def __post_init__(self):
        if self.proposal not in ("miffbs", "diffbs"):
            raise ValueError("proposal must be 'miffbs' or 'diffbs'")
        if self.l_inner is None:
            self.l_inner = 1 if self.proposal == "miffbs" else 100
        if self.regen_threshold is None:
            self.regen_threshold = self.n_guiding / 2.0


@dataclass
class EvidenceEstimate:
    model_number: int
    log_ml: float
    se_log: float
    n_theta: int
    l_inner: int
    method: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.isfinite(self.se_log) and self.se_log < 0:
            raise ValueError("standard error cannot be negative")

    def range3(self):
        """log of (mean -+ 3 SE) on the likelihood scale."""
        return _log_range(self.log_ml, self.se_log)


def _log_range(log_mean: float, se_rel: float, width: float = 3.0):
    if not np.isfinite(log_mean):
        return (-np.inf, -np.inf)
    lo = log_mean + np.log1p(-width * se_rel) if width * se_rel < 1.0 else -np.inf
    hi = log_mean + np.log1p(width * se_rel)
    return (float(lo), float(hi))


def _log_mean_and_se(log_weights: np.ndarray):
    """(log mean, relative SE of the mean) of weights given in log domain."""
    lw = np.asarray(log_weights, dtype=float)
    m = lw.max() if lw.size else -np.inf
    if m == -np.inf:
        return -np.inf, np.inf
    u = np.exp(lw - m)
    mean_u = u.mean()
    log_mean = m + np.log(mean_u)
    if lw.size < 2:
        return float(log_mean), np.inf
    se_rel = u.std(ddof=1) / (mean_u * np.sqrt(lw.size))
    return float(log_mean), float(se_rel)


def _parallel(fn, n_units: int, threads: int, gens):
    results = [None] * n_units
    if threads <= 1:
        for i in range(n_units):
            results[i] = fn(i, gens[i])
        return results
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {pool.submit(fn, i, gens[i]): i for i in range(n_units)}
        for fut, i in futures.items():
            results[i] = fut.result()
    return results


def estimate_evidence(model: SirModel, y: ObservationGrid, config: EvidenceConfig,
                      rng, mixture: DefenseMixture = None) -> EvidenceEstimate:
    """Evidence of one model by importance sampling.

    Fits the defense mixture first when none is supplied.  Parameter draws
    that lose trajectory support are kept with weight zero and surfaced in
    the diagnostics.
    """
    gen = as_generator(rng)
    variant = model.variant
    if mixture is None:
        run = mcmc_joint(model, y, config.mcmc_iters, gen)
        mixture = fit_defense_mixture(run.z_samples, variant,
                                      lam=config.mixture_weight,
                                      df=config.mixture_df)
    template = model.compile(SirParams.from_free(
        untransform(mixture.mean, variant), variant), y)
    gens = spawn_generators(gen.integers(0, 2 ** 63), config.n_theta)

    def unit(i, g):
        z = mixture.sample(g)
        params = SirParams.from_free(untransform(z, variant), variant)
        cm = _rebind(model, params, template)
        log_theta_ratio = (prior_log_density_transformed(z, variant)
                           - mixture.log_density(z))
        try:
            x0 = initial_trajectory(cm)
            ens = generate_guiding_samples(x0, cm, config.n_guiding,
                                           config.burn_in_sweeps, g)
            inner = np.empty(config.l_inner)
            regens = 0
            min_ess = float(config.n_guiding)
            if config.proposal == "diffbs" and not config.diffbs_fresh_reference:
                ref = select_high_posterior(ens, cm)
            for l in range(config.l_inner):
                if config.proposal == "miffbs":
                    draw = miffbs_propose(ens, cm, g, config.regen_threshold,
                                          refresh_sweeps=config.refresh_sweeps)
                    regens += draw.n_regenerations
                    min_ess = min(min_ess, draw.min_ess)
                else:
                    if config.diffbs_fresh_reference:
                        pick = int(g.integers(0, ens.n_samples))
                        ref = HiddenTrajectories(
                            ens.trajectories[pick].copy(), cm.n_states)
                    draw = diffbs_propose(ref, cm, g)
                lp = _k._complete_logdens(draw.trajectory.states, *cm.kernel_args())
                inner[l] = lp - draw.log_q
            log_w = log_theta_ratio + log_sum_exp(inner) - np.log(config.l_inner)
            return log_w, regens, min_ess, False
        except ZeroSupportError:
            return -np.inf, 0, 0.0, True

    results = _parallel(unit, config.n_theta, config.threads, gens)
    log_w = np.array([r[0] for r in results])
    failures = int(sum(r[3] for r in results))
    log_ml, se_rel = _log_mean_and_se(log_w)
    diag = {
        "support_failures": failures,
        "regenerations": int(sum(r[1] for r in results)),
        "min_ess": float(min((r[2] for r in results if not r[3]),
                             default=np.nan)),
        "ess_trace": [float(r[2]) for r in results],
        "proposal": config.proposal,
        "n_guiding": config.n_guiding,
        "regen_threshold": config.regen_threshold,
    }
    return EvidenceEstimate(variant.model_number, log_ml, se_rel,
                            config.n_theta, config.l_inner,
                            "is-" + config.proposal, diag)


@dataclass
class RankingRow:
    model_number: int
    log_ml: float
    se_log: float
    lo3: float
    hi3: float
    rank: int
    category: str


@dataclass
class RankingTable:
    rows: list

    def best(self) -> RankingRow:
        return next(r for r in self.rows if r.category == "best")

    def by_model(self, m: int) -> RankingRow:
        return next(r for r in self.rows if r.model_number == m)


def bayes_factor_table(estimates, unavailable=()) -> RankingTable:
    """Rank models by evidence and bucket them by Bayes factor vs the best.

    ``estimates`` holds one entry per estimated model (None entries are
    ignored); models whose estimation failed outright go in
    ``unavailable`` and stay in the table as marked empty rows rather than
    disappearing.  Categories depend only on evidence differences;
    boundaries fall into the weaker bucket.
    """
    have = [e for e in estimates if e is not None]
    if not have:
        raise ValueError("no estimates to rank")
    best_log = max(e.log_ml for e in have)
    best_model = min(e.model_number for e in have if e.log_ml == best_log)
    order = sorted(have, key=lambda e: (-e.log_ml, e.model_number))
    rank_of = {e.model_number: i + 1 for i, e in enumerate(order)}
    rows = []
    for e in have:
        lo, hi = e.range3()
        log_bf = best_log - e.log_ml  # log BF of best vs this model
        if e.model_number == best_model:
            cat = "best"
        elif log_bf < np.log(BF_SUBSTANTIAL):
            cat = "substantial-support"
        elif log_bf <= np.log(BF_STRONG):
            cat = "weak-support"
        else:
            cat = "rejected"
        rows.append(RankingRow(e.model_number, e.log_ml, e.se_log, lo, hi,
                               rank_of[e.model_number], cat))
    for m in unavailable:
        rows.append(RankingRow(int(m), np.nan, np.nan, np.nan, np.nan,
                               0, "unavailable"))
    rows.sort(key=lambda r: r.model_number)
    return RankingTable(rows)


# ---------------------------------------------------------------------------
# fixed-parameter method comparison
# ---------------------------------------------------------------------------


@dataclass
class MethodReport:
    method: str
    n_estimates: int
    mean_log: float
    lo3: float
    hi3: float
    wall_seconds: float
    note: str = ""
    estimates: np.ndarray = field(default=None, repr=False)


def compare_methods(model: SirModel, params: SirParams, y: ObservationGrid,
                    rng, *, methods=("ff", "diffbs", "miffbs", "pf"),
                    budget_estimates: int = 100, budget_seconds: float = None,
                    n_particles: int = 5000, n_guiding: int = 100,
                    diffbs_replicates: int = 100, miffbs_inner: int = 1,
                    diffbs_fresh_reference: bool = False,
                    burn_in_sweeps: int = 10, refresh_sweeps: int = 2,
                    regen_threshold: float = None, ff_budget: int = None,
                    threads: int = 1) -> list:
    """Repeated fixed-theta estimates of log p(Y | params) per method.

    Each Monte Carlo method produces ``budget_estimates`` independent
    estimates (or as many as fit in ``budget_seconds``); the report carries
    the log of their average and the +-3 SE range on the likelihood scale.
    The exact filter contributes a single value, or an absence note when
    its budget refuses the instance.
    """
    from .exact import DEFAULT_BUDGET, FilterBudgetError, joint_forward_filter
    from .pf import pf_loglik

    gen = as_generator(rng)
    cm = model.compile(params, y)
    if regen_threshold is None:
        regen_threshold = n_guiding / 2.0
    reports = []
    for method in methods:
        t0 = time.perf_counter()
        if method == "ff":
            try:
                ll = joint_forward_filter(cm, budget=ff_budget or DEFAULT_BUDGET)
                reports.append(MethodReport("ff", 1, float(ll), float(ll),
                                            float(ll), time.perf_counter() - t0,
                                            estimates=np.array([ll])))
            except FilterBudgetError as e:
                reports.append(MethodReport("ff", 0, np.nan, np.nan, np.nan,
                                            time.perf_counter() - t0, note=str(e)))
            continue

        def one_estimate(i, g, method=method):
            if method == "pf":
                return pf_loglik(cm, n_particles=n_particles, rng=g)
            x0 = initial_trajectory(cm)
            ens = generate_guiding_samples(x0, cm, n_guiding, burn_in_sweeps, g)
            if method == "diffbs":
                ref = select_high_posterior(ens, cm)
                draws = []
                for _ in range(diffbs_replicates):
                    if diffbs_fresh_reference:
                        pick = int(g.integers(0, ens.n_samples))
                        ref = HiddenTrajectories(ens.trajectories[pick].copy(),
                                                 cm.n_states)
                    try:
                        d = diffbs_propose(ref, cm, g)
                    except ZeroSupportError:
                        draws.append(-np.inf)
                        continue
                    lp = _k._complete_logdens(d.trajectory.states, *cm.kernel_args())
                    draws.append(lp - d.log_q)
                return log_sum_exp(draws) - np.log(len(draws))
            if method == "miffbs":
                draws = []
                for _ in range(miffbs_inner):
                    try:
                        d = miffbs_propose(ens, cm, g, regen_threshold,
                                           refresh_sweeps=refresh_sweeps)
                    except ZeroSupportError:
                        draws.append(-np.inf)
                        continue
                    lp = _k._complete_logdens(d.trajectory.states, *cm.kernel_args())
                    draws.append(lp - d.log_q)
                return log_sum_exp(draws) - np.log(len(draws))
            raise ValueError("unknown method %r" % method)

        ests = []
        if budget_seconds is not None:
            child = gen.integers(0, 2 ** 63)
            gens = spawn_generators(child, 1_000_000)
            i = 0
            while time.perf_counter() - t0 < budget_seconds:
                ests.append(one_estimate(i, gens[i]))
                i += 1
        else:
            gens = spawn_generators(gen.integers(0, 2 ** 63), budget_estimates)
            ests = _parallel(one_estimate, budget_estimates, threads, gens)
        ests = np.asarray(ests, dtype=float)
        mean_log, se_rel = _log_mean_and_se(ests)
        lo, hi = _log_range(mean_log, se_rel)
        reports.append(MethodReport(method, len(ests), mean_log, lo, hi,
                                    time.perf_counter() - t0, estimates=ests))
    return reports


def format_comparison(reports, label: str = "") -> str:
    """Fixed-width text layout with the common integer part factored out."""
    finite = [r.mean_log for r in reports if np.isfinite(r.mean_log)]
    if not finite:
        return "no finite estimates"
    int_part = np.floor(max(finite))
    lines = []
    if label:
        lines.append(label)
    lines.append("integer part: %d" % int_part)
    for r in reports:
        if not np.isfinite(r.mean_log):
            lines.append("%-8s absent (%s)" % (r.method, r.note))
            continue
        frac = r.mean_log - int_part
        if r.n_estimates > 1:
            lo, hi = r.lo3 - int_part, r.hi3 - int_part
            lines.append("%-8s mean %+0.4f  range [%+0.4f, %+0.4f]  (n=%d)"
                         % (r.method, frac, lo, hi, r.n_estimates))
        else:
            lines.append("%-8s exact %+0.4f" % (r.method, frac))
    return "\n".join(lines)
