"""Posterior sampling of the model parameters and the defense mixture.

The only consumer is the evidence estimator: it needs a parameter proposal
q(theta) that tracks the posterior but keeps the prior's full support.  A
joint MCMC run (adaptive random-walk moves on the transformed parameters
alternating with one Gibbs sweep of the hidden states) supplies samples;
a Gaussian is moment-matched to them and mixed with the prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import _kernels as _k
from ._rng import as_generator, kernel_state
from .core import ObservationGrid
from .iffbs import _counts_for, initial_trajectory
from .sir import (ModelVariant, SirModel, SirParams,
                  prior_log_density_transformed, sample_prior, transform,
                  untransform)


@dataclass
class DefenseMixture:
    """lambda * fitted Gaussian + (1 - lambda) * prior, on the transformed scale.

    The prior component guarantees positive density wherever the prior is
    positive, so importance weights against the posterior stay integrable.
    A Student-t location-scale component (``df`` set) is available for
    heavier tails.
    """

    lam: float
    mean: np.ndarray
    cov: np.ndarray
    variant: ModelVariant
    df: float = None
    _chol: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("mixture weight must lie in [0, 1)")
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self._chol is None:
            self._chol = _jittered_cholesky(self.cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def _component_log_density(self, z: np.ndarray) -> float:
        d = self.dim
        u = np.linalg.solve(self._chol, z - self.mean)
        quad = float(u @ u)
        logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        if self.df is None:
            return -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)
        nu = self.df
        return float(gammaln((nu + d) / 2.0) - gammaln(nu / 2.0)
                     - 0.5 * (d * np.log(nu * np.pi) + logdet)
                     - 0.5 * (nu + d) * np.log1p(quad / nu))

    def log_density(self, z) -> float:
        z = np.asarray(z, dtype=float)
        lp_prior = prior_log_density_transformed(z, self.variant)
        if self.lam == 0.0:
            return float(lp_prior)
        return float(np.logaddexp(np.log(self.lam) + self._component_log_density(z),
                                  np.log1p(-self.lam) + lp_prior))

    def log_density_many(self, z: np.ndarray) -> np.ndarray:
        """Vectorized density over an (n, d) batch of transformed points."""
        z = np.asarray(z, dtype=float)
        lp_prior = np.sum(z - np.exp(z), axis=-1)
        if self.lam == 0.0:
            return lp_prior
        d = self.dim
        u = np.linalg.solve(self._chol, (z - self.mean).T).T
        quad = np.einsum("ni,ni->n", u, u)
        logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        if self.df is None:
            comp = -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)
        else:
            nu = self.df
            comp = (gammaln((nu + d) / 2.0) - gammaln(nu / 2.0)
                    - 0.5 * (d * np.log(nu * np.pi) + logdet)
                    - 0.5 * (nu + d) * np.log1p(quad / nu))
        return np.logaddexp(np.log(self.lam) + comp,
                            np.log1p(-self.lam) + lp_prior)

    def sample(self, rng) -> np.ndarray:
        gen = as_generator(rng)
        if gen.uniform() < self.lam:
            eps = gen.standard_normal(self.dim)
            if self.df is not None:
                eps = eps * np.sqrt(self.df / gen.chisquare(self.df))
            return self.mean + self._chol @ eps
        return transform(sample_prior(self.variant, gen), self.variant)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "mean": self.mean.tolist(),
                "cov": self.cov.tolist(), "model": self.variant.model_number,
                "df": self.df}

    @staticmethod
    def from_dict(d: dict) -> "DefenseMixture":
        return DefenseMixture(d["lambda"], np.array(d["mean"]), np.array(d["cov"]),
                              ModelVariant.from_model_number(d["model"]),
                              df=d.get("df"))


def _jittered_cholesky(cov: np.ndarray) -> np.ndarray:
    jitter = 0.0
    scale = max(float(np.trace(cov)) / max(cov.shape[0], 1), 1e-12)
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-10 * scale)
    raise np.linalg.LinAlgError("covariance could not be regularized")


def fit_defense_mixture(z_samples: np.ndarray, variant: ModelVariant,
                        lam: float = 0.95, df: float = None) -> DefenseMixture:
    """Moment-match the Gaussian component to transformed posterior samples."""
    z = np.asarray(z_samples, dtype=float)
    if z.ndim != 2 or z.shape[0] < 100:
        raise ValueError("need at least 100 transformed samples")
    if z.shape[1] != variant.n_free_params:
        raise ValueError("sample dimension does not match the variant")
    return DefenseMixture(lam, z.mean(axis=0), np.cov(z.T, ddof=1).reshape(z.shape[1], -1),
                          variant, df=df)


@dataclass
class McmcResult:
    z_samples: np.ndarray      # (n_kept, d) transformed draws, post burn-in
    accept_rate: float
    variant: ModelVariant

    def natural_samples(self) -> np.ndarray:
        return untransform(self.z_samples, self.variant)

    def tied_samples(self) -> np.ndarray:
        """(n_kept, 7) samples expanded to the full parameter vector."""
        out = np.empty((self.z_samples.shape[0], 7))
        for i, row in enumerate(self.natural_samples()):
            out[i] = SirParams.from_free(row, self.variant).as_array()
        return out


def mcmc_joint(model: SirModel, y: ObservationGrid, n_iter: int = 10000,
               rng=None, *, burn_frac: float = 0.2,
               target_accept: float = 0.234) -> McmcResult:
    """Adaptive random-walk Metropolis on theta alternating with state sweeps.

    Targets p(theta, X | Y); the returned matrix holds the post-burn-in
    transformed parameter draws.  Proposal covariance follows the running
    empirical covariance with a scale factor steered toward the target
    acceptance rate; both freeze once burn-in ends.
    """
    gen = as_generator(rng)
    variant = model.variant
    d = variant.n_free_params
    n_burn = int(round(burn_frac * n_iter))

    z = transform(sample_prior(variant, gen), variant)
    params = SirParams.from_free(untransform(z, variant), variant)
    cm = model.compile(params, y)
    x = initial_trajectory(cm)
    state = kernel_state(gen)

    def posterior_term(cm_):
        return _k._complete_logdens(x.states, *cm_.kernel_args())

    lp = posterior_term(cm) + prior_log_density_transformed(z, variant)
    if lp == -np.inf:
        raise RuntimeError("initial state has zero posterior density")

    mean = z.copy()
    m2 = np.zeros((d, d))
    n_obs = 1
    log_scale = 0.0
    base_sd = 0.2
    chol = None
    kept = np.empty((n_iter - n_burn, d))
    n_accept = 0

    for it in range(n_iter):
        adapting = it < n_burn
        if chol is None or adapting:
            if n_obs > max(4 * d, 20):
                cov = m2 / (n_obs - 1) + 1e-9 * np.eye(d)
                chol = np.linalg.cholesky((2.38 ** 2 / d) * np.exp(log_scale) * cov)
            else:
                chol = base_sd * np.exp(0.5 * log_scale) * np.eye(d)
        z_prop = z + chol @ gen.standard_normal(d)
        params_prop = SirParams.from_free(untransform(z_prop, variant), variant)
        cm_prop = _rebind(model, params_prop, cm)
        lp_prop = posterior_term(cm_prop) + prior_log_density_transformed(z_prop, variant)
        accept = lp_prop - lp > np.log(gen.uniform())
        if accept:
            z, lp, cm, params = z_prop, lp_prop, cm_prop, params_prop
            n_accept += 1
        if adapting:
            step = 2.0 / (it + 10) ** 0.6
            log_scale += step * ((1.0 if accept else 0.0) - target_accept)
            log_scale = min(max(log_scale, -20.0), 20.0)
            n_obs += 1
            delta = z - mean
            mean += delta / n_obs
            m2 += np.outer(delta, z - mean)
        # one Gibbs sweep of the hidden states at the current theta
        icnt, mall = _counts_for(cm, x.states)
        _, status = _k._iffbs_sweep(x.states, icnt, mall, *cm.kernel_args(),
                                    0, cm.n_chains, state)
        if status != 0:
            raise RuntimeError("state sweep lost support during MCMC")
        lp = posterior_term(cm) + prior_log_density_transformed(z, variant)
        if it >= n_burn:
            kept[it - n_burn] = z
    return McmcResult(kept, n_accept / n_iter, variant)


def _rebind(model: SirModel, params: SirParams, cm_template) -> "object":
    """Compiled model for new params, reusing the data-dependent arrays."""
    from .core import CompiledChmm

    init = np.empty_like(cm_template.init)
    for k, c in enumerate(model.chickens):
        init[k] = model.initial_row(k, params)
    return CompiledChmm(
        n_states=cm_template.n_states,
        n_steps=cm_template.n_steps,
        n_chains=cm_template.n_chains,
        coupling_state=cm_template.coupling_state,
        pen_of_chain=cm_template.pen_of_chain,
        cls_of_chain=cm_template.cls_of_chain,
        pen_start=cm_template.pen_start,
        present=cm_template.present,
        init=init,
        emis=cm_template.emis,
        trans=model.transition_tables(params),
    )
