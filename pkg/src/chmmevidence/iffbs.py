"""Per-chain Gibbs updates of the hidden state process.

One update resamples a single chain's whole path from its full conditional
given every other chain, using a modified forward pass whose extra factor
accounts for the other chains' observed transitions (their rates depend on
this chain through the coupling counts).  Sweeping all chains leaves
p(X | Y, params) invariant; long runs of sweeps provide the guiding
ensembles behind the importance proposals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from ._rng import as_generator, kernel_state
from .core import CompiledChmm, HiddenTrajectories, ZeroSupportError


@dataclass
class ChainConditional:
    """Per-time quantities from one modified forward pass.

    ``filtered[t]`` is the normalized conditional of the chain's state at t
    given its own observations up to t and every other chain; ``predictive``
    and ``log_other_factor`` are the two ingredients (the latter is the log
    probability of the other chains' t -> t+1 transitions as a function of
    this chain's state, up to a constant); ``transitions[t]`` is the chain's
    own t -> t+1 matrix under the conditioning counts.
    """

    filtered: np.ndarray
    predictive: np.ndarray
    log_other_factor: np.ndarray
    transitions: np.ndarray


@dataclass
class GuidingEnsemble:
    """Trajectory draws from p(X | Y, params) with importance weights.

    Fresh ensembles are equally weighted; the weights are consumed (and
    mutated) by the marginalizing proposal.  ess = 1 / sum(w^2).
    """

    trajectories: np.ndarray  # (N, K, T) int8
    weights: np.ndarray       # (N,) normalized

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.int8)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.trajectories.ndim != 3:
            raise ValueError("trajectories must be (N, K, T)")
        if self.weights.shape != (self.trajectories.shape[0],):
            raise ValueError("one weight per trajectory")

    @property
    def n_samples(self) -> int:
        return self.trajectories.shape[0]

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    @staticmethod
    def equal_weights(trajectories) -> "GuidingEnsemble":
        n = trajectories.shape[0]
        return GuidingEnsemble(trajectories, np.full(n, 1.0 / n))


def _counts_for(cm: CompiledChmm, states: np.ndarray):
    icnt = np.zeros((cm.n_pens, 2, cm.n_steps), dtype=np.int32)
    mall = np.zeros((cm.n_pens, 2, max(cm.n_steps - 1, 1),
                     cm.n_states, cm.n_states), dtype=np.int32)
    _k._build_counts(states, cm.coupling_state, cm.pen_of_chain,
                     cm.cls_of_chain, cm.present, icnt, mall)
    return icnt, mall


def modified_forward_pass(k: int, x: HiddenTrajectories,
                          cm: CompiledChmm) -> ChainConditional:
    """Forward pass for chain k against the other chains of ``x``.

    Chain k's current values are ignored (they are being resampled).
    Raises :class:`ZeroSupportError` if some step has no mass.
    """
    t_steps, s = cm.n_steps, cm.n_states
    icnt, mall = _counts_for(cm, x.states)
    filtered = np.empty((t_steps, s))
    trans_used = np.empty((t_steps, s, s))
    pred = np.empty((t_steps, s))
    logq = np.empty((t_steps, s))
    status = _k._chain_forward(k, x.states, icnt, mall, *cm.kernel_args(),
                               filtered, trans_used, pred, logq)
    if status != 0:
        raise ZeroSupportError("chain %d has no supported path given the others" % k)
    return ChainConditional(filtered, pred, logq, trans_used)


def iffbs_chain_update(k: int, x: HiddenTrajectories, cm: CompiledChmm,
                       rng) -> float:
    """Resample chain k in place; returns its exact full-conditional log density."""
    gen = as_generator(rng)
    state = kernel_state(gen)
    icnt, mall = _counts_for(cm, x.states)
    t_steps, s = cm.n_steps, cm.n_states
    filtered = np.empty((t_steps, s))
    trans_used = np.empty((t_steps, s, s))
    pred = np.empty((t_steps, s))
    logq = np.empty((t_steps, s))
    row = np.empty(s)
    path = np.empty(t_steps, dtype=np.int8)
    logdens, status = _k._iffbs_update(k, x.states, icnt, mall, *cm.kernel_args(),
                                       filtered, trans_used, pred, logq, row,
                                       path, state)
    if status != 0:
        raise ZeroSupportError("chain %d has no supported path given the others" % k)
    return float(logdens)


def iffbs_sweep(x: HiddenTrajectories, cm: CompiledChmm, rng, *,
                chains=None) -> float:
    """One Gibbs sweep over ``chains`` (default: all, in index order).

    Updates ``x`` in place and returns the sum of the chains' sampled
    full-conditional log densities.
    """
    gen = as_generator(rng)
    state = kernel_state(gen)
    icnt, mall = _counts_for(cm, x.states)
    if chains is None:
        k_lo, k_hi = 0, cm.n_chains
    else:
        k_lo, k_hi = chains
    logdens, status = _k._iffbs_sweep(x.states, icnt, mall, *cm.kernel_args(),
                                      k_lo, k_hi, state)
    if status != 0:
        raise ZeroSupportError("sweep hit a zero-support configuration")
    return float(logdens)


def initial_trajectory(cm: CompiledChmm, max_repairs: int = None) -> HiddenTrajectories:
    """A support-consistent grid to start the Gibbs sampler from.

    Per chain: start in the coupling state when the initial distribution
    allows it (inoculated individuals), otherwise in the most likely
    initial state; hold each state while the emissions allow it; when an
    observation forces a move, step into a supported state, imputing the
    coupling state one step before the first such evidence.  A bounded
    repair loop then widens coupling-state periods until the complete
    density is finite.
    """
    k_chains, t_steps, s = cm.n_chains, cm.n_steps, cm.n_states
    cs = cm.coupling_state
    grid = np.zeros((k_chains, t_steps), dtype=np.int8)
    for k in range(k_chains):
        sup0 = cm.init[k] * cm.emis[k, 0]
        if sup0[cs] > 0.0:
            cur = cs
        else:
            cur = int(np.argmax(sup0))
        grid[k, 0] = cur
        for t in range(1, t_steps):
            if not cm.present[k, t]:
                grid[k, t] = cur
                continue
            if cm.emis[k, t, cur] > 0.0:
                grid[k, t] = cur
                continue
            supported = np.flatnonzero(cm.emis[k, t] > 0.0)
            if supported.size == 0:
                raise ZeroSupportError("chain %d has an impossible observation at %d" % (k, t))
            above = supported[supported > cur]
            nxt = int(above[0]) if above.size else int(supported[-1])
            if nxt != cs and cur != cs and t >= 2 and cm.emis[k, t - 1, cs] > 0.0:
                grid[k, t - 1] = cs  # pass through the coupling state first
            grid[k, t] = nxt
            cur = nxt
    if max_repairs is None:
        max_repairs = k_chains * t_steps
    for _ in range(max_repairs):
        if _k._complete_logdens(grid, *cm.kernel_args()) > -np.inf:
            return HiddenTrajectories(grid, s)
        if not _repair_once(cm, grid):
            break
    raise ZeroSupportError("could not construct a support-consistent start")


def _repair_once(cm: CompiledChmm, grid: np.ndarray) -> bool:
    """Widen one coupling-state period backwards to unblock a dead transition."""
    cs = cm.coupling_state
    for k in range(cm.n_chains):
        run = np.flatnonzero(grid[k] == cs)
        if run.size == 0:
            continue
        t0 = int(run[0])
        if t0 >= 1 and cm.emis[k, t0 - 1, cs] > 0.0 and grid[k, t0 - 1] != cs:
            trial = grid[k, t0 - 1]
            grid[k, t0 - 1] = cs
            if t0 - 1 == 0 and cm.init[k, cs] <= 0.0:
                grid[k, t0 - 1] = trial
                continue
            return True
    return False


def generate_guiding_samples(x0: HiddenTrajectories, cm: CompiledChmm,
                             n_samples: int, burn_in: int, rng) -> GuidingEnsemble:
    """Run ``burn_in`` sweeps, then collect one trajectory per further sweep.

    ``x0`` is the starting grid (mutated in place; pass a copy to keep it).
    Samples come back equally weighted.
    """
    gen = as_generator(rng)
    state = kernel_state(gen)
    icnt, mall = _counts_for(cm, x0.states)
    ens = np.empty((n_samples, cm.n_chains, cm.n_steps), dtype=np.int8)
    status = _k._collect_guiding(x0.states, icnt, mall, *cm.kernel_args(),
                                 0, burn_in, ens, state)
    if status != 0:
        raise ZeroSupportError("guiding-sample generation hit a zero-support state")
    return GuidingEnsemble.equal_weights(ens)
