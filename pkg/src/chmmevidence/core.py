"""Core abstractions for coupled hidden Markov models (CHMMs).

A CHMM here is a collection of K discrete Markov chains observed over T
steps.  Chains are grouped into independent blocks (pens); within a block a
chain's transition law may depend on the other chains only through the
per-class counts of chains occupying one designated *coupling state* (for
the epidemic models this is the count of infectious individuals).  That
restriction is what keeps every sampler in this package linear in K.

Probabilities live in the log domain except for the length-S rows inside
the forward/backward recursions, which are renormalized at every step and
therefore safe in the linear domain.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

#: Observation code for a censored/unobserved cell.  Valid anywhere in an
#: observation grid; contributes nothing to the likelihood.
MISSING = -1

LOG_ZERO = -np.inf


class ZeroSupportError(RuntimeError):
    """A conditional distribution had no mass anywhere (invalid configuration)."""


@dataclass(frozen=True)
class StateSpace:
    """Common per-chain state space: at least two uniquely labeled states."""

    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ValueError("state space needs at least two states")
        if len(set(labels)) != len(labels):
            raise ValueError("state labels must be unique")

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(label)


class HiddenTrajectories:
    """K x T grid of hidden states, the central latent object.

    The grid is the one mutable core type: samplers rewrite single chains in
    place.  Every entry must lie in ``[0, n_states)``.
    """

    __slots__ = ("states", "n_states")

    def __init__(self, states: np.ndarray, n_states: int):
        states = np.asarray(states, dtype=np.int8)
        if states.ndim != 2:
            raise ValueError("states must be a K x T grid")
        if states.size and (states.min() < 0 or states.max() >= n_states):
            raise ValueError("state out of range [0, %d)" % n_states)
        self.states = states
        self.n_states = int(n_states)

    @property
    def n_chains(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1]

    def copy(self) -> "HiddenTrajectories":
        return HiddenTrajectories(self.states.copy(), self.n_states)

    def __eq__(self, other):
        return (
            isinstance(other, HiddenTrajectories)
            and self.n_states == other.n_states
            and np.array_equal(self.states, other.states)
        )


class ObservationGrid:
    """K x T grid of observation symbols; ``MISSING`` allowed anywhere."""

    __slots__ = ("symbols",)

    def __init__(self, symbols: np.ndarray):
        symbols = np.asarray(symbols, dtype=np.int16)
        if symbols.ndim != 2:
            raise ValueError("symbols must be a K x T grid")
        self.symbols = symbols

    @property
    def n_chains(self) -> int:
        return self.symbols.shape[0]

    @property
    def n_steps(self) -> int:
        return self.symbols.shape[1]

    def matches(self, x: HiddenTrajectories) -> bool:
        return self.symbols.shape == x.states.shape


@dataclass
class ChainGrouping:
    """Chain-to-group map plus per-step presence flags.

    ``present[k, t]`` is False once chain k has been physically removed;
    absent chains are excluded from all summary counts and their hidden
    chain is frozen (identity transitions, no emissions).
    """

    group_of_chain: np.ndarray
    n_groups: int
    present: np.ndarray = None

    def __post_init__(self):
        self.group_of_chain = np.asarray(self.group_of_chain, dtype=np.int32)
        if self.group_of_chain.ndim != 1:
            raise ValueError("group_of_chain must be 1-D")
        if self.group_of_chain.size and self.group_of_chain.max() >= self.n_groups:
            raise ValueError("group index out of range")
        if self.present is not None:
            self.present = np.asarray(self.present, dtype=bool)


@dataclass
class SummaryStatistics:
    """Per-time counts of chains in each state, split by group.

    ``counts[t, g, s]`` = number of chains of group g present at time t in
    state s.  For each (t, g) the counts sum to the number of present
    chains of that group.
    """

    counts: np.ndarray

    def total(self, t: int, group: int) -> int:
        return int(self.counts[t, group].sum())

    def apply_cell_update(self, grouping: ChainGrouping, k: int, t: int,
                          old_state: int, new_state: int) -> None:
        """Incremental update after chain k's state at time t changed.

        A full one-chain rewrite therefore costs O(T) instead of O(KT).
        """
        if grouping.present is not None and not grouping.present[k, t]:
            return
        g = grouping.group_of_chain[k]
        self.counts[t, g, old_state] -= 1
        self.counts[t, g, new_state] += 1


def compute_summaries(x: HiddenTrajectories, grouping: ChainGrouping) -> SummaryStatistics:
    """Count chains per (group, state) at every time step.

    Only present chains are counted.  Raises on dimension mismatch between
    the grid and the grouping metadata.
    """
    k_chains, t_steps = x.states.shape
    if grouping.group_of_chain.shape[0] != k_chains:
        raise ValueError("grouping covers %d chains, grid has %d"
                         % (grouping.group_of_chain.shape[0], k_chains))
    if grouping.present is not None and grouping.present.shape != x.states.shape:
        raise ValueError("presence flags must match the K x T grid")
    counts = np.zeros((t_steps, grouping.n_groups, x.n_states), dtype=np.int32)
    for k in range(k_chains):
        g = grouping.group_of_chain[k]
        for t in range(t_steps):
            if grouping.present is None or grouping.present[k, t]:
                counts[t, g, x.states[k, t]] += 1
    return SummaryStatistics(counts)


def log_sum_exp(values) -> float:
    """Stable log(sum(exp(values))); all -inf gives -inf, empty input raises."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = arr.max()
    if not np.isfinite(m):
        if m == -np.inf:
            return -np.inf
        return m  # +inf or nan propagates
    return float(m + np.log(np.exp(arr - m).sum()))


class ChmmModel(ABC):
    """Contract every concrete CHMM implements.

    A model binds the chain layout (pens, coupling classes, presence) and
    exposes initial/transition/emission laws as functions of a parameter
    object.  Transition rows may depend on the other chains only through
    ``counts``: the per-class number of *other* present chains of the same
    pen occupying ``coupling_state`` at the current time.

    Concrete attributes required of subclasses:

    - ``state_space``: StateSpace
    - ``n_chains``, ``n_steps``: ints
    - ``pen_of_chain``: (K,) int array, chains sorted so pens are contiguous
    - ``cls_of_chain``: (K,) int array with values in {0, 1}
    - ``pen_sizes``: (n_pens,) int array
    - ``present``: (K, T) bool array
    - ``coupling_state``: int
    """

    state_space: StateSpace
    coupling_state: int = 1

    # -- linear-domain laws (the ones algorithms consume) ------------------

    @abstractmethod
    def initial_row(self, k: int, params) -> np.ndarray:
        """Length-S initial distribution of chain k."""

    @abstractmethod
    def transition_row(self, k: int, t: int, from_state: int,
                       counts: np.ndarray, params) -> np.ndarray:
        """Length-S row P(X_{t+1} = . | X_t = from_state, counts).

        ``counts`` holds the per-class coupling-state counts among the other
        present chains of k's pen at time t.
        """

    @abstractmethod
    def emission_row(self, k: int, t: int, symbol: int, params) -> np.ndarray:
        """Length-S vector of p(symbol | state); all ones for MISSING."""

    @abstractmethod
    def prior_log_density(self, params) -> float:
        """Log prior density of the parameter object (natural units)."""

    # -- log-domain views of the same laws ---------------------------------

    def initial_log_probs(self, k: int, params) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.initial_row(k, params))

    def transition_log_row(self, k: int, t: int, from_state: int,
                           counts: np.ndarray, params) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.transition_row(k, t, from_state, counts, params))

    def emission_log_prob(self, k: int, t: int, symbol: int, state: int, params) -> float:
        row = self.emission_row(k, t, symbol, params)
        v = row[state]
        return float(np.log(v)) if v > 0.0 else LOG_ZERO

    # -- layout helpers -----------------------------------------------------

    @property
    def n_pens(self) -> int:
        return len(self.pen_sizes)

    def grouping(self) -> ChainGrouping:
        """Group chains by (pen, class) for summary statistics."""
        groups = self.pen_of_chain * 2 + self.cls_of_chain
        return ChainGrouping(groups, self.n_pens * 2, self.present)

    def pen_offsets(self) -> np.ndarray:
        """Start offset of each pen in chain order (pens must be contiguous)."""
        pens = np.asarray(self.pen_of_chain)
        if np.any(np.diff(pens) < 0):
            raise ValueError("chains must be sorted by pen")
        offsets = np.zeros(self.n_pens + 1, dtype=np.int32)
        for p in range(self.n_pens):
            offsets[p + 1] = offsets[p] + int((pens == p).sum())
        if offsets[-1] != len(pens):
            raise ValueError("pen indices must be dense 0..n_pens-1")
        return offsets

    # -- compiled (array) form ----------------------------------------------

    def transition_tables(self, params) -> np.ndarray:
        """Dense transition tables for every (pen, class, count combo).

        Shape (n_pens, 2, n+1, n+1, S, S) with n = max pen size; entry
        [p, c, i0, i1] is the matrix for a class-c chain of pen p when the
        other present chains of that pen hold i0 class-0 / i1 class-1
        occupants of the coupling state.  Subclasses may override with a
        vectorized builder.
        """
        s = self.state_space.size
        nmax = int(max(self.pen_sizes))
        tables = np.empty((self.n_pens, 2, nmax + 1, nmax + 1, s, s))
        offsets = self.pen_offsets()
        for p in range(self.n_pens):
            for c in range(2):
                members = [k for k in range(offsets[p], offsets[p + 1])
                           if self.cls_of_chain[k] == c]
                k_rep = members[0] if members else offsets[p]
                for i0 in range(nmax + 1):
                    for i1 in range(nmax + 1):
                        counts = np.array([i0, i1])
                        for f in range(s):
                            tables[p, c, i0, i1, f] = self.transition_row(
                                k_rep, 0, f, counts, params)
        return tables

    def compile(self, params, y: ObservationGrid) -> "CompiledChmm":
        return compile_chmm(self, params, y)


@dataclass
class CompiledChmm:
    """A model bound to parameters and data, flattened to plain arrays.

    This is the form every sampler kernel consumes.  Immutable once built;
    workers share it freely.
    """

    n_states: int
    n_steps: int
    n_chains: int
    coupling_state: int
    pen_of_chain: np.ndarray   # (K,) int32
    cls_of_chain: np.ndarray   # (K,) int32
    pen_start: np.ndarray      # (n_pens + 1,) int32
    present: np.ndarray        # (K, T) uint8
    init: np.ndarray           # (K, S) float64
    emis: np.ndarray           # (K, T, S) float64
    trans: np.ndarray          # (n_pens, 2, n+1, n+1, S, S) float64
    logtrans: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.logtrans is None:
            with np.errstate(divide="ignore"):
                self.logtrans = np.log(self.trans)
        # The Q-factor aggregation in the samplers assumes rows *out of* the
        # coupling state ignore the counts; anything else cannot be grouped.
        cs = self.coupling_state
        ref = self.trans[:, :, :1, :1, cs, :]
        if not np.allclose(self.trans[:, :, :, :, cs, :],
                           np.broadcast_to(ref, self.trans[:, :, :, :, cs, :].shape)):
            raise ValueError("rows out of the coupling state must not depend on counts")

    @property
    def n_pens(self) -> int:
        return len(self.pen_start) - 1

    def kernel_args(self):
        """The positional array bundle shared by all numba kernels."""
        return (self.n_states, self.coupling_state, self.pen_of_chain,
                self.cls_of_chain, self.present, self.init, self.emis,
                self.trans, self.logtrans)


def compile_chmm(model: ChmmModel, params, y: ObservationGrid) -> CompiledChmm:
    """Bind (model, params, observations) into the array form."""
    s = model.state_space.size
    k_chains, t_steps = model.n_chains, model.n_steps
    if y.symbols.shape != (k_chains, t_steps):
        raise ValueError("observation grid does not match the model layout")
    init = np.empty((k_chains, s))
    emis = np.empty((k_chains, t_steps, s))
    for k in range(k_chains):
        init[k] = model.initial_row(k, params)
        for t in range(t_steps):
            emis[k, t] = model.emission_row(k, t, int(y.symbols[k, t]), params)
    return CompiledChmm(
        n_states=s,
        n_steps=t_steps,
        n_chains=k_chains,
        coupling_state=model.coupling_state,
        pen_of_chain=np.asarray(model.pen_of_chain, dtype=np.int32),
        cls_of_chain=np.asarray(model.cls_of_chain, dtype=np.int32),
        pen_start=model.pen_offsets(),
        present=np.asarray(model.present, dtype=np.uint8),
        init=init,
        emis=emis,
        trans=model.transition_tables(params),
    )


def log_complete_density(x: HiddenTrajectories, y: ObservationGrid,
                         params, model: ChmmModel) -> float:
    """log p(Y | X, params) + log p(X | params).

    Missing observations contribute nothing.  Any zero-probability
    transition or emission yields -inf rather than an exception.
    """
    if not y.matches(x):
        raise ValueError("observation grid does not match the trajectory grid")
    if x.states.shape != (model.n_chains, model.n_steps):
        raise ValueError("grid does not match the model layout")
    k_chains, t_steps = x.states.shape
    summaries = compute_summaries(x, model.grouping())
    present = model.present
    total = 0.0
    for k in range(k_chains):
        pen = model.pen_of_chain[k]
        row = model.initial_row(k, params)
        v = row[x.states[k, 0]]
        if v <= 0.0:
            return LOG_ZERO
        total += np.log(v)
        for t in range(t_steps):
            sym = int(y.symbols[k, t])
            if sym != MISSING:
                e = model.emission_row(k, t, sym, params)[x.states[k, t]]
                if e <= 0.0:
                    return LOG_ZERO
                total += np.log(e)
            if t + 1 < t_steps:
                s_now = x.states[k, t]
                s_next = x.states[k, t + 1]
                if not present[k, t + 1]:
                    # frozen chain: state carries forward with probability 1
                    if s_next != s_now:
                        return LOG_ZERO
                    continue
                counts = _exclusive_counts(summaries, model, k, t, x)
                p = model.transition_row(k, t, s_now, counts, params)[s_next]
                if p <= 0.0:
                    return LOG_ZERO
                total += np.log(p)
    return float(total)


def _exclusive_counts(summaries: SummaryStatistics, model: ChmmModel,
                      k: int, t: int, x: HiddenTrajectories) -> np.ndarray:
    """Coupling-state counts per class among the other present chains of k's pen."""
    pen = model.pen_of_chain[k]
    cs = model.coupling_state
    counts = np.array([summaries.counts[t, pen * 2 + 0, cs],
                       summaries.counts[t, pen * 2 + 1, cs]], dtype=np.int64)
    if model.present[k, t] and x.states[k, t] == cs:
        counts[model.cls_of_chain[k]] -= 1
    return counts
