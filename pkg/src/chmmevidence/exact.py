"""Exact smoothing over the joint product space, pen by pen.

Pens are independent blocks, so the exact forward filter runs over
``S**K_pen`` joint states per pen and total log likelihoods add.  The cost
grows by a factor of S^2 per added chain, which is why a budget guards
every entry point; within the budget these routines are the ground truth
the Monte Carlo estimators are tested against.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _k
from ._rng import as_generator, kernel_state
from .core import ChmmModel, CompiledChmm, HiddenTrajectories, ObservationGrid

#: Largest joint state count filtered by default (3 states, 10 chains).
DEFAULT_BUDGET = 3 ** 10


class FilterBudgetError(RuntimeError):
    """The joint state space is too large for exact filtering."""


def _compiled(model, params, y) -> CompiledChmm:
    if isinstance(model, CompiledChmm):
        return model
    if not isinstance(model, ChmmModel):
        raise TypeError("expected a ChmmModel or CompiledChmm")
    return model.compile(params, y)


def _check_budget(cm: CompiledChmm, budget: int):
    sizes = np.diff(cm.pen_start)
    for p, m in enumerate(sizes):
        n_joint = cm.n_states ** int(m)
        if n_joint > budget:
            raise FilterBudgetError(
                "pen %d has %d chains: %d joint states exceeds the budget of %d"
                % (p, m, n_joint, budget))


def _pen_alphas(cm: CompiledChmm):
    """Run the filter for every pen; yields (lo, hi, alpha, pen log lik)."""
    for p in range(cm.n_pens):
        lo = int(cm.pen_start[p])
        hi = int(cm.pen_start[p + 1])
        alpha = np.empty((cm.n_steps, cm.n_states ** (hi - lo)))
        ll = _k._pen_filter(lo, hi, *cm.kernel_args()[:8], alpha)
        yield lo, hi, alpha, ll


def joint_forward_filter(model, params=None, y: ObservationGrid = None, *,
                         budget: int = DEFAULT_BUDGET, per_pen: bool = False):
    """Exact log marginal likelihood log p(Y | params).

    Refuses pens whose joint space exceeds ``budget``.  Returns the total,
    or (total, per-pen list) when ``per_pen`` is set; zero-likelihood data
    gives -inf.
    """
    cm = _compiled(model, params, y)
    _check_budget(cm, budget)
    pens = []
    total = 0.0
    for _, _, _, ll in _pen_alphas(cm):
        pens.append(ll)
        total += ll
    if per_pen:
        return total, pens
    return total


def joint_ffbs_sample(model, params=None, y: ObservationGrid = None, rng=None, *,
                      budget: int = DEFAULT_BUDGET):
    """One exact draw from p(X | Y, params) with its log posterior density."""
    cm = _compiled(model, params, y)
    _check_budget(cm, budget)
    gen = as_generator(rng)
    state = kernel_state(gen)
    grid = np.empty((cm.n_chains, cm.n_steps), dtype=np.int8)
    logdens = 0.0
    for lo, hi, alpha, ll in _pen_alphas(cm):
        if ll == -np.inf:
            raise ValueError("data has zero likelihood; nothing to sample")
        out = np.empty((hi - lo, cm.n_steps), dtype=np.int8)
        logdens += _k._pen_backward_sample(
            lo, hi, cm.n_states, cm.coupling_state, cm.pen_of_chain,
            cm.cls_of_chain, cm.present, cm.trans, alpha, state, out)
        grid[lo:hi] = out
    return HiddenTrajectories(grid, cm.n_states), float(logdens)


def exact_smoothing_marginals(model, params=None, y: ObservationGrid = None, *,
                              budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """P(X_t^k = s | Y, params) exactly, as a (K, T, S) array."""
    cm = _compiled(model, params, y)
    _check_budget(cm, budget)
    marg = np.empty((cm.n_chains, cm.n_steps, cm.n_states))
    for lo, hi, alpha, ll in _pen_alphas(cm):
        if ll == -np.inf:
            raise ValueError("data has zero likelihood; marginals undefined")
        m = hi - lo
        smooth = np.empty_like(alpha)
        _k._pen_smooth(lo, hi, cm.n_states, cm.coupling_state, cm.pen_of_chain,
                       cm.cls_of_chain, cm.present, cm.trans, alpha, smooth)
        # renormalize against accumulated round-off before splitting by chain
        smooth /= smooth.sum(axis=1, keepdims=True)
        cube = smooth.reshape((cm.n_steps,) + (cm.n_states,) * m)
        for i in range(m):
            axes = tuple(1 + j for j in range(m) if j != i)
            marg[lo + i] = cube.sum(axis=axes)
    np.clip(marg, 0.0, 1.0, out=marg)
    return marg
