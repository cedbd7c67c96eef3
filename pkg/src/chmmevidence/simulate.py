"""Synthetic transmission experiments.

Generates ground-truth trajectories and the matching observation grids for
the crossed four-pen design and the per-pen scaling benchmarks.  Deaths are
observed at the step the bird enters the removed state; a coin flip can
convert a death into a moribund extraction recorded one half day earlier
with censoring (and physical removal) from the death step onward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import as_generator
from .core import MISSING, HiddenTrajectories, ObservationGrid
from .sir import (ChickenMeta, EpiState, ModelVariant, SirModel,
                  SirObservation, SirParams, half_day_transition_matrices)

#: Half-day steps covering the ten-day trial.
DEFAULT_STEPS = 20


@dataclass(frozen=True)
class PenSpec:
    """One pen: total birds, how many are inoculated, and the type layout."""

    size: int
    n_challenge: int
    challenge_transgenic: bool
    contact_transgenic: bool

    def __post_init__(self):
        if not 0 <= self.n_challenge <= self.size:
            raise ValueError("challenge count cannot exceed the pen size")


@dataclass(frozen=True)
class ExperimentDesign:
    pens: tuple
    n_steps: int = DEFAULT_STEPS
    moribund_prob: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "pens", tuple(self.pens))
        if not 0.0 <= self.moribund_prob <= 1.0:
            raise ValueError("moribund_prob must lie in [0, 1]")


def _cross(size: int, n_challenge: int, n_steps: int,
           moribund_prob: float = 0.5) -> ExperimentDesign:
    """Four pens crossing challenge type x in-contact type."""
    pens = tuple(PenSpec(size, n_challenge, ct, it)
                 for ct, it in [(False, False), (False, True),
                                (True, False), (True, True)])
    return ExperimentDesign(pens, n_steps, moribund_prob)


def preset_designs() -> dict:
    """Named designs: the 4x17 crossed trial and the scaling series."""
    designs = {"hpai-cross": _cross(17, 5, DEFAULT_STEPS)}
    for size, n_chal in [(4, 1), (8, 2), (16, 5), (32, 10), (64, 19)]:
        designs["scaling-%d" % size] = _cross(size, n_chal, DEFAULT_STEPS)
    return designs


def get_design(name: str) -> ExperimentDesign:
    try:
        return preset_designs()[name]
    except KeyError:
        raise KeyError("unknown preset design %r (have: %s)"
                       % (name, ", ".join(sorted(preset_designs()))))


def design_chickens(design: ExperimentDesign) -> list:
    """Bird metadata for a design, everyone present throughout."""
    chickens = []
    for pen, spec in enumerate(design.pens):
        for i in range(spec.size):
            challenge = i < spec.n_challenge
            chickens.append(ChickenMeta(
                pen=pen,
                transgenic=spec.challenge_transgenic if challenge else spec.contact_transgenic,
                challenge=challenge,
                present=np.ones(design.n_steps, dtype=bool),
                pen_size=spec.size,
            ))
    return chickens


@dataclass
class SimulatedExperiment:
    truth: HiddenTrajectories
    observations: ObservationGrid
    chickens: list = field(repr=False)

    def model(self, variant: ModelVariant) -> SirModel:
        return SirModel(self.chickens, self.truth.n_steps, variant)


def simulate_experiment(design: ExperimentDesign, params: SirParams,
                        variant: ModelVariant, rng) -> SimulatedExperiment:
    """Forward-simulate the design and apply the death/moribund observation rules.

    The returned truth grid is frozen after each bird's physical removal
    (states carry forward), so it always has positive probability under
    the inference model.
    """
    if not params.satisfies(variant):
        raise ValueError("params violate the variant's parameter ties")
    gen = as_generator(rng)
    # pens evolve on independent child streams, so a pen's outcome does not
    # depend on how much randomness the other pens consumed
    pen_gens = gen.spawn(len(design.pens))
    chickens = design_chickens(design)
    n = len(chickens)
    t_steps = design.n_steps
    states = np.zeros((n, t_steps), dtype=np.int8)
    pen_of = np.array([c.pen for c in chickens])
    tg = np.array([c.transgenic for c in chickens])

    S, I, R = (int(EpiState.SUSCEPTIBLE), int(EpiState.INFECTIOUS),
               int(EpiState.REMOVED))
    for k, c in enumerate(chickens):
        if c.challenge:
            p = params.p_t if c.transgenic else params.p_n
            states[k, 0] = I if pen_gens[c.pen].uniform() < p else S
    for t in range(t_steps - 1):
        for pen, spec in enumerate(design.pens):
            in_pen = np.flatnonzero(pen_of == pen)
            cur = states[in_pen, t]
            i_n = int(np.sum((cur == I) & ~tg[in_pen]))
            i_t = int(np.sum((cur == I) & tg[in_pen]))
            pressure = (params.beta_n * i_n + params.beta_t * i_t) / spec.size
            mats = {
                False: half_day_transition_matrices(params.nu_n * pressure, params.gamma_n),
                True: half_day_transition_matrices(pressure, params.gamma_t),
            }
            u = pen_gens[pen].uniform(size=in_pen.size)
            for j, k in enumerate(in_pen):
                row = mats[bool(tg[k])][states[k, t]]
                nxt = int(np.searchsorted(np.cumsum(row), u[j], side="right"))
                states[k, t + 1] = min(nxt, 2)

    symbols = np.full((n, t_steps), int(SirObservation.ALIVE), dtype=np.int16)
    alive = (states == S) | (states == I)
    symbols[~alive] = int(SirObservation.DEAD)
    for k, c in enumerate(chickens):
        removed = np.flatnonzero(states[k] == R)
        if removed.size == 0:
            continue
        tau = int(removed[0])
        was_infectious = states[k, tau - 1] == I  # tau >= 1: no bird starts removed
        if was_infectious and pen_gens[c.pen].uniform() < design.moribund_prob:
            # extracted while visibly sick one half day before the death
            symbols[k, tau - 1] = int(SirObservation.MORIBUND_REMOVED)
            symbols[k, tau:] = MISSING
            c.present[tau:] = False
            states[k, tau:] = I  # frozen at the extraction state
        else:
            symbols[k, tau] = int(SirObservation.DEAD)
            if tau + 1 < t_steps:
                symbols[k, tau + 1:] = MISSING
                c.present[tau + 1:] = False
            # states stay R: absorbing, consistent with the frozen chain
    return SimulatedExperiment(HiddenTrajectories(states, 3),
                               ObservationGrid(symbols), chickens)
