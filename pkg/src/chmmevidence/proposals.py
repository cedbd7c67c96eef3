"""Importance proposals over the hidden state process.

Both proposals factor the trajectory chain by chain.  The direct one
(DIFFBS) conditions each not-yet-proposed chain on a fixed high-posterior
reference, which is fast but narrows the proposal; the marginalizing one
(MIFFBS) replaces that conditioning with a weighted average over a guiding
ensemble, regenerating the ensemble whenever its effective sample size
degenerates.  Every draw carries the exact log density of the trajectory
actually sampled, so importance weights are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from ._rng import as_generator, kernel_state
from .core import CompiledChmm, HiddenTrajectories, ZeroSupportError
from .iffbs import GuidingEnsemble, _counts_for

__all__ = ["GuidingEnsemble", "ProposalDraw", "ess", "select_high_posterior",
           "diffbs_propose", "miffbs_propose", "regenerate"]


@dataclass
class ProposalDraw:
    """A sampled trajectory with the exact log density it was drawn under."""

    trajectory: HiddenTrajectories
    log_q: float
    n_regenerations: int = 0
    min_ess: float = field(default=np.nan)

    def __post_init__(self):
        if not np.isfinite(self.log_q):
            raise ValueError("a returned draw must have a finite log density")


def ess(weights) -> float:
    """Effective sample size 1 / sum(w^2) of normalized weights."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be normalized")
    return float(1.0 / np.sum(w ** 2))


def select_high_posterior(ensemble: GuidingEnsemble,
                          cm: CompiledChmm) -> HiddenTrajectories:
    """The ensemble member with the highest complete-data density.

    Ties break toward the lowest index, so duplicates of the winner do not
    change the outcome.
    """
    if ensemble.n_samples == 0:
        raise ValueError("empty ensemble")
    best_idx = 0
    best = -np.inf
    for n in range(ensemble.n_samples):
        ld = _k._complete_logdens(ensemble.trajectories[n], *cm.kernel_args())
        if ld > best:
            best = ld
            best_idx = n
    return HiddenTrajectories(ensemble.trajectories[best_idx].copy(), cm.n_states)


def diffbs_propose(reference: HiddenTrajectories, cm: CompiledChmm,
                   rng) -> ProposalDraw:
    """Chain-by-chain draw conditioning on ``reference`` for later chains.

    Chain k is sampled given the already-proposed chains 1..k-1 and the
    reference values of chains k+1..K; the log density is the sum of the
    per-chain full-conditional densities.  Raises
    :class:`ZeroSupportError` on a mid-proposal support failure (the
    estimator-invalidating case the caller must record).
    """
    gen = as_generator(rng)
    state = kernel_state(gen)
    grid = reference.states.copy()
    icnt, mall = _counts_for(cm, grid)
    logq, status = _k._iffbs_sweep(grid, icnt, mall, *cm.kernel_args(),
                                   0, cm.n_chains, state)
    if status != 0:
        raise ZeroSupportError("direct proposal hit a zero-support configuration")
    return ProposalDraw(HiddenTrajectories(grid, cm.n_states), float(logq))


def miffbs_propose(ensemble: GuidingEnsemble, cm: CompiledChmm, rng,
                   regen_threshold: float, *, refresh_sweeps: int = 2,
                   regen_each_step: bool = False) -> ProposalDraw:
    """Draw a trajectory by marginalizing over the guiding ensemble.

    Implements the chain-wise decomposition with weighted-average forward
    and backward-smoothing rows; when the weight ESS drops below
    ``regen_threshold`` at a chain boundary the ensemble is rebuilt
    conditioned on the proposed prefix.  ``regen_each_step`` extends the
    check to every backward step (regenerating conditioned on the partial
    chain as well); it is off by default and runs on a slower code path.
    The input ensemble is not modified.  Raises
    :class:`ZeroSupportError` if an all-zero averaged row recurs after one
    forced regeneration.
    """
    gen = as_generator(rng)
    if regen_each_step:
        return _miffbs_propose_stepwise(ensemble, cm, gen,
                                        float(regen_threshold), refresh_sweeps)
    state = kernel_state(gen)
    work = ensemble.trajectories.copy()
    out = np.empty((cm.n_chains, cm.n_steps), dtype=np.int8)
    logq, status, n_regen, min_ess = _k._miffbs_draw(
        work, *cm.kernel_args(), float(regen_threshold), refresh_sweeps,
        state, out)
    if status != 0:
        raise ZeroSupportError("marginal proposal lost support; draw aborted")
    return ProposalDraw(HiddenTrajectories(out, cm.n_states), float(logq),
                        n_regenerations=int(n_regen), min_ess=float(min_ess))


def _miffbs_propose_stepwise(ensemble, cm, gen, threshold, refresh_sweeps):
    """Marginalizing proposal with ESS checks inside the backward recursion.

    Mid-chain regeneration conditions on the already-sampled part of the
    current chain by pinning those cells through one-hot emission rows, so
    the ordinary sweep kernels draw from the right conditional.
    """
    n, n_chains, n_steps = ensemble.trajectories.shape
    s = cm.n_states
    work = ensemble.trajectories.copy()
    w = np.full(n, 1.0 / n)
    out = np.empty((n_chains, n_steps), dtype=np.int8)
    logq = 0.0
    n_regen = 0
    min_ess = float(n)
    filtered = np.empty((n, n_steps, s))
    trans = np.empty((n, n_steps, s, s))

    def member_counts(grid):
        icnt = np.zeros((cm.n_pens, 2, n_steps), dtype=np.int32)
        mall = np.zeros((cm.n_pens, 2, max(n_steps - 1, 1), s, s), dtype=np.int32)
        _k._build_counts(grid, cm.coupling_state, cm.pen_of_chain,
                         cm.cls_of_chain, cm.present, icnt, mall)
        return icnt, mall

    def forward_all(k, emis=None):
        args = list(cm.kernel_args())
        if emis is not None:
            args[6] = emis
        pred = np.empty((n_steps, s))
        lq = np.empty((n_steps, s))
        for i in range(n):
            if w[i] <= 0.0:
                filtered[i] = 0.0
                continue
            icnt, mall = member_counts(work[i])
            status = _k._chain_forward(k, work[i], icnt, mall, *args,
                                       filtered[i], trans[i], pred, lq)
            if status != 0:
                w[i] = 0.0
                filtered[i] = 0.0

    def regenerate_members(k, pinned_from=None):
        nonlocal w, n_regen
        emis = cm.emis
        if pinned_from is not None:
            emis = cm.emis.copy()
            for u in range(pinned_from, n_steps):
                emis[k, u, :] = 0.0
                emis[k, u, out[k, u]] = cm.emis[k, u, out[k, u]]
        start = int(np.argmax(w))
        grid = work[start].copy()
        if pinned_from is not None:
            grid[k, pinned_from:] = out[k, pinned_from:]
        icnt, mall = member_counts(grid)
        args = list(cm.kernel_args())
        args[6] = emis
        state = kernel_state(gen)
        status = _k._collect_guiding(grid, icnt, mall, *args, k,
                                     refresh_sweeps, work, state)
        if status != 0:
            raise ZeroSupportError("regeneration failed to find a supported configuration")
        w = np.full(n, 1.0 / n)
        n_regen += 1

    state = kernel_state(gen)
    for k in range(n_chains):
        e = 1.0 / float(np.sum(w ** 2))
        min_ess = min(min_ess, e)
        if e < threshold:
            regenerate_members(k)
        forward_all(k)
        rrow = (w[:, None] * filtered[:, n_steps - 1, :]).sum(axis=0)
        norm = rrow.sum()
        if norm <= 0.0:
            raise ZeroSupportError("marginal proposal lost support; draw aborted")
        s_t = _k._sample_row(rrow, norm, _k._u01(state))
        out[k, n_steps - 1] = s_t
        logq += np.log(rrow[s_t] / norm)
        w = w * filtered[:, n_steps - 1, s_t]
        if w.sum() <= 0.0:
            raise ZeroSupportError("marginal proposal lost support; draw aborted")
        w /= w.sum()
        for t in range(n_steps - 2, -1, -1):
            e = 1.0 / float(np.sum(w ** 2))
            min_ess = min(min_ess, e)
            if e < threshold:
                regenerate_members(k, pinned_from=t + 1)
                forward_all(k)
            nxt = out[k, t + 1]
            brow = filtered[:, t, :] * trans[:, t, :, nxt]
            denom = brow.sum(axis=1)
            ok = denom > 0.0
            w = np.where(ok, w, 0.0)
            brow[ok] /= denom[ok, None]
            brow[~ok] = 0.0
            rrow = (w[:, None] * brow).sum(axis=0)
            norm = rrow.sum()
            if norm <= 0.0:
                raise ZeroSupportError("marginal proposal lost support; draw aborted")
            s_t = _k._sample_row(rrow, norm, _k._u01(state))
            out[k, t] = s_t
            logq += np.log(rrow[s_t] / norm)
            w = w * brow[:, s_t]
            if w.sum() <= 0.0:
                raise ZeroSupportError("marginal proposal lost support; draw aborted")
            w /= w.sum()
        for i in range(n):
            icnt, mall = member_counts(work[i])
            _k._apply_chain_path(k, work[i], icnt, mall, out[k],
                                 cm.coupling_state, cm.pen_of_chain,
                                 cm.cls_of_chain, cm.present)
    return ProposalDraw(HiddenTrajectories(out, cm.n_states), float(logq),
                        n_regenerations=n_regen, min_ess=float(min_ess))


def regenerate(ensemble: GuidingEnsemble, prefix: np.ndarray,
               cm: CompiledChmm, rng, *, refresh_sweeps: int = 2) -> GuidingEnsemble:
    """Fresh equally-weighted ensemble over chains k0..K given a fixed prefix.

    ``prefix`` holds the first k0 chains' paths ((k0, T) array; k0 may be
    0, in which case this is plain guiding-sample generation seeded from
    the current ensemble).  Sweeps never touch the prefix rows, so the
    rebuild gets cheaper as more chains are fixed.
    """
    prefix = np.asarray(prefix, dtype=np.int8)
    k0 = prefix.shape[0]
    if k0 and prefix.shape[1] != cm.n_steps:
        raise ValueError("prefix must span all time steps")
    gen = as_generator(rng)
    state = kernel_state(gen)
    ens = ensemble.trajectories.copy()
    if k0:
        ens[:, :k0, :] = prefix[None, :, :]
    n = ens.shape[0]
    icnt_n = np.zeros((n, cm.n_pens, 2, cm.n_steps), dtype=np.int32)
    mall_n = np.zeros((n, cm.n_pens, 2, max(cm.n_steps - 1, 1),
                       cm.n_states, cm.n_states), dtype=np.int32)
    start = 0
    best = -np.inf
    for i in range(n):
        ld = _k._complete_logdens(ens[i], *cm.kernel_args())
        if ld > best:
            best = ld
            start = i
    status = _k._regen_ensemble(ens, icnt_n, mall_n, *cm.kernel_args(),
                                k0, start, refresh_sweeps, state)
    if status != 0:
        raise ZeroSupportError("regeneration failed to find a supported configuration")
    return GuidingEnsemble.equal_weights(ens)
