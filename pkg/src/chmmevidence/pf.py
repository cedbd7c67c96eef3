"""Bootstrap particle filter baseline for the log likelihood.

Particles carry the joint state of every chain and advance half day by
half day with systematic resampling at each step.  Observations that pin a
single state (deaths, moribund extractions) would starve a plain bootstrap
proposal, so at those cells the transition proposal is restricted to the
supported state with the restriction mass folded into the weight.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _k
from ._rng import as_generator, kernel_state
from .core import CompiledChmm, ObservationGrid


def _pinned_cells(cm: CompiledChmm) -> np.ndarray:
    """Cells whose emission supports exactly one state."""
    support = (cm.emis > 0.0).sum(axis=2)
    return (support == 1).astype(np.uint8)


def pf_loglik(model, params=None, y: ObservationGrid = None, n_particles: int = 1000,
              rng=None, *, return_diagnostics: bool = False):
    """Particle estimate of log p(Y | params).

    Unbiased on the likelihood scale.  A fully degenerate particle system
    returns -inf (flagged in the diagnostics rather than raised).
    """
    if n_particles < 2:
        raise ValueError("need at least two particles")
    cm = model if isinstance(model, CompiledChmm) else model.compile(params, y)
    gen = as_generator(rng)
    state = kernel_state(gen)
    lookahead = _pinned_cells(cm)
    ll, degenerate = _k._pf_loglik(n_particles, cm.n_states, cm.coupling_state,
                                   cm.pen_of_chain, cm.cls_of_chain, cm.present,
                                   cm.init, cm.emis, cm.trans, lookahead, state)
    if return_diagnostics:
        return float(ll), {"degenerate": bool(degenerate)}
    return float(ll)
