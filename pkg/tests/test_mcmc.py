import numpy as np
import pytest
from scipy.stats import qmc

from chmmevidence import exact, simulate
from chmmevidence.core import ObservationGrid
from chmmevidence.mcmc import DefenseMixture, fit_defense_mixture, mcmc_joint
from chmmevidence.sir import (ModelVariant, SirObservation, SirParams,
                              prior_log_density_transformed, transform)

from toys import small_sir

A, D = int(SirObservation.ALIVE), int(SirObservation.DEAD)


def fitted_mixture(variant, lam=0.95, df=None, seed=0, n=2000, spread=0.6):
    rng = np.random.default_rng(seed)
    d = variant.n_free_params
    z = rng.normal(-0.4, spread, size=(n, d))
    return fit_defense_mixture(z, variant, lam=lam, df=df)


class TestDefenseMixture:
    def test_lambda_zero_equals_prior(self):
        v = ModelVariant.from_model_number(16)
        mix = fitted_mixture(v, lam=0.0)
        rng = np.random.default_rng(1)
        for _ in range(20):
            z = rng.normal(size=7)
            assert mix.log_density(z) == pytest.approx(
                prior_log_density_transformed(z, v), abs=1e-12)

    def test_positive_wherever_prior_is(self):
        v = ModelVariant.from_model_number(3)
        mix = fitted_mixture(v, lam=0.95)
        rng = np.random.default_rng(2)
        # any finite transformed point has positive prior density
        for _ in range(100):
            z = rng.normal(0, 6, size=v.n_free_params)
            assert np.isfinite(mix.log_density(z))

    def test_sampling_matches_support(self):
        v = ModelVariant.from_model_number(1)
        mix = fitted_mixture(v, lam=0.5)
        rng = np.random.default_rng(3)
        for _ in range(200):
            z = mix.sample(rng)
            assert np.isfinite(mix.log_density(z))

    def test_self_normalization_by_stratified_prior_draws(self):
        # MC integral of the mixture density over the prior: E_p[q/p] = 1
        v = ModelVariant.from_model_number(3)
        mix = fitted_mixture(v, lam=0.95, spread=0.4)
        d = v.n_free_params
        sampler = qmc.LatinHypercube(d=d, seed=12345)
        u = sampler.random(n=1_000_000)
        # inverse-CDF through the natural priors, then transform
        natural = np.empty_like(u)
        names = v.free_param_names()
        for i, name in enumerate(names):
            if name.startswith("p"):
                natural[:, i] = u[:, i]
            else:
                natural[:, i] = -np.log1p(-u[:, i])
        z = transform(natural, v)
        ratios = np.exp(mix.log_density_many(z)
                        - prior_log_density_transformed_many(z))
        assert ratios.mean() == pytest.approx(1.0, abs=0.01)

    def test_rejects_too_few_samples(self):
        v = ModelVariant.from_model_number(1)
        with pytest.raises(ValueError):
            fit_defense_mixture(np.zeros((50, 3)), v)

    def test_rejects_unit_weight(self):
        v = ModelVariant.from_model_number(1)
        with pytest.raises(ValueError):
            DefenseMixture(1.0, np.zeros(3), np.eye(3), v)

    def test_student_t_component(self):
        v = ModelVariant.from_model_number(1)
        mix = fitted_mixture(v, lam=0.9, df=4.0)
        rng = np.random.default_rng(4)
        z = mix.sample(rng)
        assert np.isfinite(mix.log_density(z))
        # heavier tails than the Gaussian fit far from the center
        gauss = fitted_mixture(v, lam=0.9)
        far = mix.mean + 12.0
        assert mix._component_log_density(far) > gauss._component_log_density(far)

    def test_round_trip_through_dict(self):
        v = ModelVariant.from_model_number(5)
        mix = fitted_mixture(v, lam=0.95)
        back = DefenseMixture.from_dict(mix.to_dict())
        z = np.full(v.n_free_params, 0.3)
        assert back.log_density(z) == pytest.approx(mix.log_density(z))


def prior_log_density_transformed_many(z):
    return np.sum(z - np.exp(z), axis=-1)


@pytest.fixture(scope="module")
def model1_run(study_params):
    variant = ModelVariant.from_model_number(1)
    params = SirParams.from_free([0.9, 2.0, 0.5], variant)
    design = simulate.get_design("scaling-4")
    sim = simulate.simulate_experiment(design, params, variant,
                                       np.random.default_rng(11))
    model = sim.model(variant)
    run = mcmc_joint(model, sim.observations, 4000,
                     np.random.default_rng(1))
    return params, run


class TestMcmcJoint:

    def test_acceptance_rate_window(self, model1_run):
        _, run = model1_run
        assert 0.1 <= run.accept_rate <= 0.5

    def test_posterior_covers_simulating_point(self, model1_run):
        params, run = model1_run
        natural = run.natural_samples()
        gamma = natural[:, 2]
        assert abs(gamma.mean() - params.gamma_n) < 3 * gamma.std()

    def test_tied_samples_expand_to_full_vector(self, model1_run):
        _, run = model1_run
        tied = run.tied_samples()
        assert tied.shape[1] == 7
        assert np.allclose(tied[:, 0], tied[:, 1])   # p_n == p_t under model 1
        assert np.allclose(tied[:, 4], 1.0)          # no susceptibility split

    def test_matches_grid_posterior_on_single_bird(self):
        # one challenge bird dying mid-trial: the (p, gamma) posterior is
        # computable on a grid; beta is prior-only since nothing couples
        variant = ModelVariant.from_model_number(1)
        model, _ = small_sir(1, 8, challenge=[True], transgenic=[False],
                             model_number=1)
        y = ObservationGrid(np.array([[A, A, A, A, D, D, D, D]], dtype=np.int16))

        run = mcmc_joint(model, y, 20000, np.random.default_rng(5))
        natural = run.natural_samples()

        p_grid = np.linspace(0.005, 0.995, 120)
        g_grid = np.linspace(0.005, 6.0, 150)
        loglik = np.empty((120, 150))
        for i, p in enumerate(p_grid):
            for j, g in enumerate(g_grid):
                params = SirParams.from_free([p, 1.0, g], variant)
                loglik[i, j] = exact.joint_forward_filter(model, params, y)
        post = np.exp(loglik - loglik.max()) * np.exp(-g_grid)[None, :]
        post /= post.sum()

        bins_p = np.linspace(0.0, 1.0, 11)
        hist_p, _ = np.histogram(natural[:, 0], bins=bins_p, density=False)
        grid_p = post.sum(axis=1)
        grid_hist_p = np.array([
            grid_p[(p_grid >= lo) & (p_grid < hi)].sum()
            for lo, hi in zip(bins_p[:-1], bins_p[1:])])
        tv_p = 0.5 * np.abs(hist_p / hist_p.sum() - grid_hist_p).sum()

        bins_g = np.linspace(0.0, 6.0, 13)
        hist_g, _ = np.histogram(np.clip(natural[:, 2], 0, 5.999), bins=bins_g)
        grid_g = post.sum(axis=0)
        grid_hist_g = np.array([
            grid_g[(g_grid >= lo) & (g_grid < hi)].sum()
            for lo, hi in zip(bins_g[:-1], bins_g[1:])])
        tv_g = 0.5 * np.abs(hist_g / hist_g.sum() - grid_hist_g).sum()
        assert tv_p < 0.05
        assert tv_g < 0.05
