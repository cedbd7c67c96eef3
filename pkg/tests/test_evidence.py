import numpy as np
import pytest

from chmmevidence import exact, simulate
from chmmevidence.core import ObservationGrid
from chmmevidence.evidence import (EvidenceConfig, EvidenceEstimate,
                                   bayes_factor_table, compare_methods,
                                   estimate_evidence, format_comparison)
from chmmevidence.mcmc import DefenseMixture
from chmmevidence.sir import ModelVariant, SirObservation, SirParams

from oracles import prior_quadrature_evidence
from toys import small_sir

A, D = int(SirObservation.ALIVE), int(SirObservation.DEAD)


def prior_mixture(variant):
    d = variant.n_free_params
    return DefenseMixture(0.0, np.zeros(d), np.eye(d), variant)


class TestEstimateEvidence:
    def test_prior_proposal_single_bird_matches_quadrature(self):
        # q(theta) = prior and an exactly optimal trajectory proposal turn
        # the weights into p(Y | theta): the estimate is the prior
        # predictive, computable by quadrature
        variant = ModelVariant.from_model_number(1)
        model, _ = small_sir(1, 6, challenge=[True], transgenic=[False],
                             model_number=1)
        y = ObservationGrid(np.array([[A, A, A, D, D, D]], dtype=np.int16))

        def loglik(p, beta, gamma):
            params = SirParams.from_free([p, beta, gamma], variant)
            return exact.joint_forward_filter(model, params, y)

        truth = prior_quadrature_evidence(loglik, n_p=20, n_rate=24)
        config = EvidenceConfig(n_theta=1500, n_guiding=20, burn_in_sweeps=2,
                                proposal="miffbs")
        est = estimate_evidence(model, y, config, np.random.default_rng(0),
                                mixture=prior_mixture(variant))
        assert est.model_number == 1
        assert abs(est.log_ml - truth) < 3 * est.se_log
        assert est.diagnostics["support_failures"] == 0

    def test_fitted_mixture_pipeline_on_pair(self, study_params):
        # end to end with the MCMC-fitted defense mixture on a two-bird pen
        variant = ModelVariant.from_model_number(16)
        model, _ = small_sir(2, 6, challenge=[True, False])
        y = ObservationGrid(np.array([[A, A, A, D, D, D],
                                      [A, A, A, A, A, A]], dtype=np.int16))
        config = EvidenceConfig(n_theta=400, n_guiding=30, burn_in_sweeps=3,
                                mcmc_iters=3000)
        est = estimate_evidence(model, y, config, np.random.default_rng(1))
        assert np.isfinite(est.log_ml)
        assert est.se_log < 0.25
        assert est.method == "is-miffbs"

    def test_diffbs_proposal_option(self, study_params):
        variant = ModelVariant.from_model_number(16)
        model, _ = small_sir(2, 5, challenge=[True, False])
        y = ObservationGrid(np.array([[A, A, A, A, A],
                                      [A, A, A, A, A]], dtype=np.int16))
        config = EvidenceConfig(n_theta=150, n_guiding=25, burn_in_sweeps=3,
                                proposal="diffbs")
        assert config.l_inner == 100
        est = estimate_evidence(model, y, config, np.random.default_rng(2),
                                mixture=prior_mixture(variant))
        assert np.isfinite(est.log_ml)
        assert est.l_inner == 100

    def test_diffbs_fresh_reference_option(self):
        variant = ModelVariant.from_model_number(1)
        model, _ = small_sir(2, 4, challenge=[True, False], model_number=1)
        y = ObservationGrid(np.array([[A, A, A, D], [A, A, A, A]],
                                     dtype=np.int16))
        config = EvidenceConfig(n_theta=60, n_guiding=20, burn_in_sweeps=2,
                                proposal="diffbs", l_inner=10,
                                diffbs_fresh_reference=True)
        est = estimate_evidence(model, y, config, np.random.default_rng(3),
                                mixture=prior_mixture(variant))
        assert np.isfinite(est.log_ml)

    def test_threads_do_not_change_the_estimate(self):
        variant = ModelVariant.from_model_number(1)
        model, _ = small_sir(2, 4, challenge=[True, False], model_number=1)
        y = ObservationGrid(np.full((2, 4), A, dtype=np.int16))
        results = []
        for threads in (1, 2):
            config = EvidenceConfig(n_theta=60, n_guiding=15, burn_in_sweeps=2,
                                    threads=threads)
            est = estimate_evidence(model, y, config, np.random.default_rng(7),
                                    mixture=prior_mixture(variant))
            results.append(est.log_ml)
        assert results[0] == results[1]

    def test_se_shrinks_with_more_draws(self):
        variant = ModelVariant.from_model_number(1)
        model, _ = small_sir(2, 4, challenge=[True, False], model_number=1)
        y = ObservationGrid(np.array([[A, A, A, D], [A, A, A, A]],
                                     dtype=np.int16))
        mix = prior_mixture(variant)
        ses = {n: [] for n in (40, 160)}
        for rep in range(20):
            for n in (40, 160):
                config = EvidenceConfig(n_theta=n, n_guiding=15, burn_in_sweeps=2)
                est = estimate_evidence(model, y, config,
                                        np.random.default_rng(100 + rep),
                                        mixture=mix)
                ses[n].append(est.se_log)
        assert np.mean(ses[160]) < np.mean(ses[40])


def fake_estimate(m, log_ml, se=0.01):
    return EvidenceEstimate(m, log_ml, se, 100, 1, "is-miffbs")


class TestBayesFactorTable:
    def test_categories_and_ranks(self):
        ests = [fake_estimate(1, -100.0), fake_estimate(2, -100.5),
                fake_estimate(3, -102.0), fake_estimate(4, -104.0)]
        table = bayes_factor_table(ests)
        assert table.best().model_number == 1
        assert table.by_model(2).category == "substantial-support"
        assert table.by_model(3).category == "weak-support"
        assert table.by_model(4).category == "rejected"
        assert [r.rank for r in table.rows] == [1, 2, 3, 4]

    def test_boundaries_fall_to_the_weaker_class(self):
        ests = [fake_estimate(1, 0.0),
                fake_estimate(2, -np.log(3.2)),
                fake_estimate(3, -np.log(10.0))]
        table = bayes_factor_table(ests)
        assert table.by_model(2).category == "weak-support"
        assert table.by_model(3).category == "weak-support"

    def test_all_equal_ties(self):
        ests = [fake_estimate(m, -50.0) for m in range(1, 17)]
        table = bayes_factor_table(ests)
        assert table.best().model_number == 1
        assert all(r.category == "substantial-support"
                   for r in table.rows if r.model_number != 1)

    def test_failed_models_stay_in_the_table_as_marked_rows(self):
        ests = [fake_estimate(1, -10.0), None, fake_estimate(3, -11.0)]
        table = bayes_factor_table(ests, unavailable=[14])
        assert {r.model_number for r in table.rows} == {1, 3, 14}
        row14 = table.by_model(14)
        assert row14.category == "unavailable"
        assert np.isnan(row14.log_ml)
        assert table.best().model_number == 1

    def test_ranking_invariant_to_constant_shift(self):
        ests = [fake_estimate(m, -90.0 - 0.7 * m) for m in range(1, 6)]
        t1 = bayes_factor_table(ests)
        shifted = [fake_estimate(m, -90.0 - 0.7 * m + 123.4) for m in range(1, 6)]
        t2 = bayes_factor_table(shifted)
        assert [r.category for r in t1.rows] == [r.category for r in t2.rows]
        assert [r.rank for r in t1.rows] == [r.rank for r in t2.rows]

    def test_range_uses_three_standard_errors(self):
        est = fake_estimate(1, -20.0, se=0.02)
        lo, hi = est.range3()
        assert lo == pytest.approx(-20.0 + np.log1p(-0.06))
        assert hi == pytest.approx(-20.0 + np.log1p(0.06))

    def test_negative_se_rejected(self):
        with pytest.raises(ValueError):
            fake_estimate(1, -20.0, se=-0.1)


class TestCompareMethods:
    def test_report_layout(self, scaling4_sim, study_params, model16):
        model = scaling4_sim.model(model16)
        reports = compare_methods(
            model, study_params, scaling4_sim.observations,
            np.random.default_rng(0), methods=("ff", "diffbs", "miffbs", "pf"),
            budget_estimates=8, n_particles=300, n_guiding=30,
            diffbs_replicates=10)
        by = {r.method: r for r in reports}
        assert by["ff"].n_estimates == 1
        truth = by["ff"].mean_log
        for name in ("diffbs", "miffbs", "pf"):
            r = by[name]
            assert r.n_estimates == 8
            assert r.lo3 <= r.mean_log <= r.hi3
            assert abs(r.mean_log - truth) < 3.0
        text = format_comparison(reports)
        assert "integer part" in text
        assert "ff" in text and "pf" in text

    def test_oracle_refusal_reported_absent(self, study_params, model16):
        sim = simulate.simulate_experiment(simulate.get_design("scaling-16"),
                                           study_params, model16,
                                           np.random.default_rng(1))
        model = sim.model(model16)
        reports = compare_methods(model, study_params, sim.observations,
                                  np.random.default_rng(2), methods=("ff",),
                                  budget_estimates=1)
        assert reports[0].n_estimates == 0
        assert not np.isfinite(reports[0].mean_log)
        assert "joint states exceeds" in reports[0].note
