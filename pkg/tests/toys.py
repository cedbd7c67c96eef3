"""Hand-built toy models used as testbeds.

The dense toy has stochastic emissions and count-coupled transitions with
full support, so conditionals are genuinely dispersed; the decoupled
variant switches the count dependence off for comparisons between coupled
and independent chains.
"""

import numpy as np

from chmmevidence.core import MISSING, ChmmModel, ObservationGrid, StateSpace
from chmmevidence.sir import ChickenMeta, ModelVariant, SirModel, SirObservation


class DenseToy(ChmmModel):
    def __init__(self, n_chains, n_steps, seed=0, n_symbols=2, coupled=True,
                 n_states=3):
        rng = np.random.default_rng(seed)
        self.state_space = StateSpace(tuple("abcde"[:n_states]))
        self.coupling_state = 1
        self.n_chains = n_chains
        self.n_steps = n_steps
        self.pen_of_chain = np.zeros(n_chains, dtype=np.int32)
        self.cls_of_chain = np.zeros(n_chains, dtype=np.int32)
        self.pen_sizes = np.array([n_chains])
        self.present = np.ones((n_chains, n_steps), dtype=bool)
        self.coupled = coupled
        s = n_states
        self._init = rng.dirichlet(np.ones(s), size=n_chains)
        self._base = rng.dirichlet(np.ones(s), size=s)
        self._tilt = rng.uniform(0.5, 2.0, size=(s, s))
        self._emit = rng.uniform(0.05, 1.0, size=(n_symbols, s))

    def initial_row(self, k, params):
        return self._init[k]

    def transition_row(self, k, t, from_state, counts, params):
        row = self._base[from_state].copy()
        if self.coupled and from_state != self.coupling_state:
            row = row * self._tilt[from_state] ** (int(counts[0]) + int(counts[1]))
        return row / row.sum()

    def emission_row(self, k, t, symbol, params):
        if symbol == MISSING:
            return np.ones(self.state_space.size)
        return self._emit[symbol]

    def prior_log_density(self, params):
        return 0.0


def toy_observations(toy, seed=0, p_missing=0.0):
    rng = np.random.default_rng(seed)
    sym = rng.integers(0, toy._emit.shape[0], size=(toy.n_chains, toy.n_steps))
    if p_missing:
        sym = np.where(rng.uniform(size=sym.shape) < p_missing, MISSING, sym)
    return ObservationGrid(sym.astype(np.int16))


def small_sir(n_chickens=2, n_steps=3, symbols=None, present=None,
              transgenic=None, challenge=None, model_number=16):
    """A one-pen SIR instance with explicit observations."""
    variant = ModelVariant.from_model_number(model_number)
    if transgenic is None:
        transgenic = [k % 2 == 1 for k in range(n_chickens)]
    if challenge is None:
        challenge = [k == 0 for k in range(n_chickens)]
    if present is None:
        present = np.ones((n_chickens, n_steps), dtype=bool)
    chickens = [ChickenMeta(0, bool(transgenic[k]), bool(challenge[k]),
                            present[k], n_chickens)
                for k in range(n_chickens)]
    model = SirModel(chickens, n_steps, variant)
    if symbols is None:
        symbols = np.full((n_chickens, n_steps), int(SirObservation.ALIVE))
    return model, ObservationGrid(np.asarray(symbols, dtype=np.int16))
