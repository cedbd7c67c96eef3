import numpy as np
import pytest

from chmmevidence.core import MISSING, log_complete_density
from chmmevidence.simulate import (ExperimentDesign, PenSpec, design_chickens,
                                   get_design, preset_designs,
                                   simulate_experiment)
from chmmevidence.sir import ModelVariant, SirObservation, SirParams

A, D, M = (int(SirObservation.ALIVE), int(SirObservation.DEAD),
           int(SirObservation.MORIBUND_REMOVED))


class TestPresets:
    def test_names(self):
        names = set(preset_designs())
        assert names == {"hpai-cross", "scaling-4", "scaling-8", "scaling-16",
                         "scaling-32", "scaling-64"}

    def test_cross_pattern_pen2(self):
        design = get_design("hpai-cross")
        pen2 = design.pens[1]
        assert pen2.size == 17 and pen2.n_challenge == 5
        assert not pen2.challenge_transgenic and pen2.contact_transgenic

    def test_scaling_challenge_counts(self):
        assert get_design("scaling-64").pens[0].n_challenge == 19
        assert get_design("scaling-4").pens[0].n_challenge == 1

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            get_design("scaling-5")

    def test_chicken_roster(self):
        chickens = design_chickens(get_design("hpai-cross"))
        assert len(chickens) == 68
        assert sum(c.challenge for c in chickens) == 20
        pen3 = [c for c in chickens if c.pen == 2]
        assert all(c.transgenic == c.challenge for c in pen3)


class TestSimulation:
    def test_zero_transmission_certain_inoculation(self, model16):
        params = SirParams(1.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.3)
        design = get_design("scaling-4")
        sim = simulate_experiment(design, params, model16,
                                  np.random.default_rng(0))
        for k, c in enumerate(sim.chickens):
            if c.challenge:
                assert sim.truth.states[k, 0] == 1
            else:
                assert np.all(sim.truth.states[k] == 0)

    def test_truth_always_supported(self, study_params, model16):
        for seed in range(6):
            design = ExperimentDesign(get_design("scaling-4").pens, 20,
                                      moribund_prob=1.0 if seed % 2 else 0.5)
            sim = simulate_experiment(design, study_params, model16,
                                      np.random.default_rng(seed))
            model = sim.model(model16)
            assert log_complete_density(sim.truth, sim.observations,
                                        study_params, model) > -np.inf

    def test_without_moribund_every_death_has_infectious_prefix(self, study_params,
                                                                model16):
        # the half-day matrix allows a same-interval S -> R jump (infected
        # and dead between grid points), so that one case is exempt
        design = ExperimentDesign(get_design("scaling-8").pens, 20, moribund_prob=0.0)
        sim = simulate_experiment(design, study_params, model16,
                                  np.random.default_rng(3))
        sym = sim.observations.symbols
        assert not np.any(sym == M)
        for k in range(sym.shape[0]):
            deaths = np.flatnonzero(sym[k] == D)
            if deaths.size and sim.truth.states[k, deaths[0] - 1] != 0:
                assert np.any(sim.truth.states[k, :deaths[0]] == 1)

    def test_moribund_pattern(self, study_params, model16):
        design = ExperimentDesign(get_design("scaling-8").pens, 20, moribund_prob=1.0)
        sim = simulate_experiment(design, study_params, model16,
                                  np.random.default_rng(4))
        sym = sim.observations.symbols
        found = 0
        for k, c in enumerate(sim.chickens):
            marks = np.flatnonzero(sym[k] == M)
            if marks.size == 0:
                continue
            found += 1
            tau = marks[0]
            assert marks.size == 1
            assert np.all(sym[k, tau + 1:] == MISSING)
            assert not c.present[tau + 1:].any()
            assert sim.truth.states[k, tau] == 1  # visibly sick means infected
        assert found > 0

    def test_removal_frequency_matches_half_day_hazard(self, model16):
        # all birds identical, no moribund censoring: the per-step removal
        # frequency of present infectious birds is 1 - exp(-gamma/2)
        params = SirParams(1.0, 1.0, 1.5, 1.5, 1.0, 0.6, 0.6)
        pens = tuple(PenSpec(40, 20, False, False) for _ in range(8))
        design = ExperimentDesign(pens, 25, moribund_prob=0.0)
        sim = simulate_experiment(design, params, model16,
                                  np.random.default_rng(5))
        states = sim.truth.states
        present = np.stack([c.present for c in sim.chickens])
        at_risk = (states[:, :-1] == 1) & present[:, 1:]
        removed = at_risk & (states[:, 1:] == 2)
        n, x = at_risk.sum(), removed.sum()
        p_hat = x / n
        p_true = 1.0 - np.exp(-0.3)
        assert n > 1000
        assert abs(p_hat - p_true) < 3 * np.sqrt(p_true * (1 - p_true) / n)

    def test_pen_outcomes_independent_of_other_pens(self, study_params, model16):
        # per-pen child streams: dropping the later pens does not change
        # what happens in the first one
        full = get_design("scaling-8")
        solo = ExperimentDesign(full.pens[:1], full.n_steps, full.moribund_prob)
        sim_full = simulate_experiment(full, study_params, model16,
                                       np.random.default_rng(42))
        sim_solo = simulate_experiment(solo, study_params, model16,
                                       np.random.default_rng(42))
        n = solo.pens[0].size
        assert np.array_equal(sim_full.truth.states[:n], sim_solo.truth.states)
        assert np.array_equal(sim_full.observations.symbols[:n],
                              sim_solo.observations.symbols)

    def test_params_must_satisfy_variant(self, model16):
        bad = SirParams(0.9, 0.8, 2.0, 2.0, 1.0, 0.5, 0.5)
        v1 = ModelVariant.from_model_number(1)
        with pytest.raises(ValueError):
            simulate_experiment(get_design("scaling-4"), bad, v1,
                                np.random.default_rng(0))

    def test_design_validation(self):
        with pytest.raises(ValueError):
            PenSpec(4, 5, False, False)
        with pytest.raises(ValueError):
            ExperimentDesign((PenSpec(4, 1, False, False),), 20, moribund_prob=1.5)
