"""Discrete-time individual-level SIR models for penned transmission trials.

Birds move through susceptible / infectious / removed states on a half-day
grid.  Transition rates are constant within each half day, so the one-step
matrix is the matrix exponential of the constant-rate generator and has a
closed form.  Sixteen model variants arise from independently tying or
splitting the initial-infection probability, transmission rate, removal
rate, and an extra susceptibility multiplier between non-transgenic and
transgenic birds.

Rate conventions: all rates are per day; the half-day step enters as the
factor 0.5 inside the exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .core import MISSING, ChmmModel, StateSpace


class EpiState(IntEnum):
    SUSCEPTIBLE = 0
    INFECTIOUS = 1
    REMOVED = 2


class SirObservation(IntEnum):
    """Observation symbols; MISSING (-1) comes from the core."""

    ALIVE = 0
    DEAD = 1
    MORIBUND_REMOVED = 2


SIR_STATES = StateSpace(("S", "I", "R"))

#: Emission support per symbol: ALIVE covers S and I, DEAD pins R, a
#: moribund extraction pins I (the bird was visibly sick, hence infected).
_EMISSION_ROWS = {
    int(SirObservation.ALIVE): np.array([1.0, 1.0, 0.0]),
    int(SirObservation.DEAD): np.array([0.0, 0.0, 1.0]),
    int(SirObservation.MORIBUND_REMOVED): np.array([0.0, 1.0, 0.0]),
    MISSING: np.array([1.0, 1.0, 1.0]),
}

#: Width of the near-equal-rates window where the closed form loses
#: precision to cancellation and a series expansion in (a - gamma) is used
#: instead.  The series is exact to ~1e-15 inside this window.
_NEAR_EQUAL_RATES = 1e-4


@dataclass(frozen=True)
class ModelVariant:
    """Which of the four parameters distinguish transgenic birds.

    The sixteen flag combinations are numbered 1..16: model m-1 in binary
    reads (split_p, split_beta, has_nu, split_gamma) from the low bit up,
    so model 1 ties everything and model 16 splits everything.
    """

    split_p: bool = False
    split_beta: bool = False
    has_nu: bool = False
    split_gamma: bool = False

    @staticmethod
    def from_model_number(m: int) -> "ModelVariant":
        if not 1 <= m <= 16:
            raise ValueError("model number must be in 1..16")
        b = m - 1
        return ModelVariant(bool(b & 1), bool(b & 2), bool(b & 4), bool(b & 8))

    @property
    def model_number(self) -> int:
        return 1 + (self.split_p | (self.split_beta << 1)
                    | (self.has_nu << 2) | (self.split_gamma << 3))

    @property
    def n_free_params(self) -> int:
        return 3 + self.split_p + self.split_beta + self.has_nu + self.split_gamma

    def free_param_names(self) -> list:
        names = ["p_n", "p_t"] if self.split_p else ["p"]
        names += ["beta_n", "beta_t"] if self.split_beta else ["beta"]
        if self.has_nu:
            names.append("nu_n")
        names += ["gamma_n", "gamma_t"] if self.split_gamma else ["gamma"]
        return names


PARAM_NAMES = ("p_n", "p_t", "beta_n", "beta_t", "nu_n", "gamma_n", "gamma_t")


@dataclass(frozen=True)
class SirParams:
    """Full seven-field parameter vector in natural units.

    Tied fields are equal by construction (build through ``from_free``);
    ``nu_n`` is exactly 1 when the variant has no susceptibility split.
    """

    p_n: float
    p_t: float
    beta_n: float
    beta_t: float
    nu_n: float
    gamma_n: float
    gamma_t: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PARAM_NAMES])

    def free_values(self, variant: ModelVariant) -> np.ndarray:
        vals = [self.p_n]
        if variant.split_p:
            vals.append(self.p_t)
        vals.append(self.beta_n)
        if variant.split_beta:
            vals.append(self.beta_t)
        if variant.has_nu:
            vals.append(self.nu_n)
        vals.append(self.gamma_n)
        if variant.split_gamma:
            vals.append(self.gamma_t)
        return np.array(vals)

    @staticmethod
    def from_free(values, variant: ModelVariant) -> "SirParams":
        vals = list(np.asarray(values, dtype=float))
        if len(vals) != variant.n_free_params:
            raise ValueError("expected %d free values, got %d"
                             % (variant.n_free_params, len(vals)))
        it = iter(vals)
        p_n = next(it)
        p_t = next(it) if variant.split_p else p_n
        beta_n = next(it)
        beta_t = next(it) if variant.split_beta else beta_n
        nu_n = next(it) if variant.has_nu else 1.0
        gamma_n = next(it)
        gamma_t = next(it) if variant.split_gamma else gamma_n
        return SirParams(p_n, p_t, beta_n, beta_t, nu_n, gamma_n, gamma_t)

    def satisfies(self, variant: ModelVariant) -> bool:
        ok = True
        if not variant.split_p:
            ok &= self.p_n == self.p_t
        if not variant.split_beta:
            ok &= self.beta_n == self.beta_t
        if not variant.has_nu:
            ok &= self.nu_n == 1.0
        if not variant.split_gamma:
            ok &= self.gamma_n == self.gamma_t
        return bool(ok)


def scaling_study_params() -> SirParams:
    """Fully-split parameter point used by the simulation benchmarks."""
    return SirParams(p_n=0.9, p_t=0.8, beta_n=2.3, beta_t=1.4,
                     nu_n=1.2, gamma_n=0.5, gamma_t=0.3)


@dataclass
class ChickenMeta:
    """Per-bird metadata: pen, type, challenge status, presence window."""

    pen: int
    transgenic: bool
    challenge: bool
    present: np.ndarray  # (T,) bool, monotone non-increasing
    pen_size: int

    def __post_init__(self):
        self.present = np.asarray(self.present, dtype=bool)
        if self.pen_size <= 0:
            raise ValueError("pen size must be positive")
        if np.any(np.diff(self.present.astype(np.int8)) > 0):
            raise ValueError("a removed bird cannot return: presence must be monotone")
        if self.challenge and not self.present[0]:
            raise ValueError("challenge birds are in the pen at the first step")


def force_of_infection(infectious_counts, chicken: ChickenMeta,
                       params: SirParams) -> float:
    """Per-day infection rate felt by a susceptible bird.

    ``infectious_counts`` = (non-transgenic, transgenic) present infectious
    birds in the bird's pen, excluding the bird itself.  The denominator is
    the fixed initial pen size.  Transgenic susceptibility is the baseline;
    non-transgenic birds carry the multiplier ``nu_n``.
    """
    i_n, i_t = int(infectious_counts[0]), int(infectious_counts[1])
    nu = 1.0 if chicken.transgenic else params.nu_n
    return nu * (params.beta_n * i_n + params.beta_t * i_t) / chicken.pen_size


def half_day_transition_matrices(a, gamma) -> np.ndarray:
    """Half-day SIR transition matrices for arrays of per-day rates.

    Returns shape ``broadcast(a, gamma) + (3, 3)``.  Row S uses the closed
    form away from a == gamma and a series in (a - gamma) inside the
    cancellation-prone window around it; the two branches agree to ~1e-12
    at the boundary, so the matrix is continuous in the rates.
    """
    a, gamma = np.broadcast_arrays(np.asarray(a, dtype=float),
                                   np.asarray(gamma, dtype=float))
    if np.any(a < 0.0) or np.any(gamma < 0.0):
        raise ValueError("rates must be non-negative")
    e_si = np.exp(-0.5 * a)
    e_ir = np.exp(-0.5 * gamma)
    delta = a - gamma
    near = np.abs(delta) < _NEAR_EQUAL_RATES
    with np.errstate(divide="ignore", invalid="ignore"):
        p_si_closed = (a / delta) * (e_ir - e_si)
    p_si_series = a * e_si * (0.5 + delta / 8.0 + delta * delta / 48.0)
    p_si = np.where(near, p_si_series, p_si_closed)
    p_si = np.clip(p_si, 0.0, 1.0)
    p_sr = np.clip(1.0 - e_si - p_si, 0.0, 1.0)
    out = np.zeros(a.shape + (3, 3))
    out[..., 0, 0] = e_si
    out[..., 0, 1] = p_si
    out[..., 0, 2] = p_sr
    out[..., 1, 1] = e_ir
    out[..., 1, 2] = 1.0 - e_ir
    out[..., 2, 2] = 1.0
    return out


def half_day_transition_matrix(a: float, gamma: float) -> np.ndarray:
    """Single half-day 3x3 matrix for infection rate ``a`` and removal rate ``gamma``."""
    return half_day_transition_matrices(float(a), float(gamma))


def initial_distribution(chicken: ChickenMeta, params: SirParams) -> np.ndarray:
    """First-step state distribution: inoculation succeeds with the type's p."""
    if chicken.challenge:
        p = params.p_t if chicken.transgenic else params.p_n
        return np.array([1.0 - p, p, 0.0])
    return np.array([1.0, 0.0, 0.0])


def emission_row(symbol: int) -> np.ndarray:
    """Linear emission weights p(symbol | state) for each of S, I, R."""
    try:
        return _EMISSION_ROWS[int(symbol)]
    except KeyError:
        raise ValueError("unknown observation symbol %r" % (symbol,))


def emission_log_prob(symbol: int, state: int) -> float:
    v = emission_row(symbol)[state]
    return float(np.log(v)) if v > 0.0 else -np.inf


def prior_log_density(params: SirParams, variant: ModelVariant) -> float:
    """Log prior over the free parameters: U(0,1) for p's, Exp(1) for rates."""
    total = 0.0
    for name, v in zip(variant.free_param_names(), params.free_values(variant)):
        if name.startswith("p"):
            if not 0.0 < v < 1.0:
                return -np.inf
        else:
            if v <= 0.0:
                return -np.inf
            total -= v
    return total


def transform(free_values, variant: ModelVariant) -> np.ndarray:
    """Map free parameters to the unconstrained scale.

    Probabilities map through log(-log p) and rates through log; errors on
    p outside (0, 1) or non-positive rates.
    """
    vals = np.asarray(free_values, dtype=float)
    names = variant.free_param_names()
    if vals.shape[-1] != len(names):
        raise ValueError("free-value length does not match the variant")
    out = np.empty_like(vals)
    for i, name in enumerate(names):
        v = vals[..., i]
        if name.startswith("p"):
            if np.any(v <= 0.0) or np.any(v >= 1.0):
                raise ValueError("p must lie strictly inside (0, 1)")
            out[..., i] = np.log(-np.log(v))
        else:
            if np.any(v <= 0.0):
                raise ValueError("rates must be positive")
            out[..., i] = np.log(v)
    return out


def untransform(z, variant: ModelVariant) -> np.ndarray:
    """Inverse of :func:`transform`."""
    z = np.asarray(z, dtype=float)
    names = variant.free_param_names()
    if z.shape[-1] != len(names):
        raise ValueError("transformed-value length does not match the variant")
    out = np.empty_like(z)
    for i, name in enumerate(names):
        if name.startswith("p"):
            out[..., i] = np.exp(-np.exp(z[..., i]))
        else:
            out[..., i] = np.exp(z[..., i])
    return out


def prior_log_density_transformed(z, variant: ModelVariant) -> float:
    """Log prior pushed forward to the transformed scale (Jacobian included).

    Every component reduces to z - e^z: the U(0,1) prior under log(-log p)
    and the Exp(1) prior under log both give that density.
    """
    z = np.asarray(z, dtype=float)
    return float(np.sum(z - np.exp(z), axis=-1))


def sample_prior(variant: ModelVariant, rng: np.random.Generator) -> np.ndarray:
    """Draw free parameters from the prior, in natural units."""
    names = variant.free_param_names()
    out = np.empty(len(names))
    for i, name in enumerate(names):
        out[i] = rng.uniform() if name.startswith("p") else rng.exponential()
    return out


class SirModel(ChmmModel):
    """The CHMM contract for a penned SIR trial.

    Chains must be ordered so pens are contiguous.  Class 0 is
    non-transgenic, class 1 transgenic; the coupling state is INFECTIOUS.
    """

    def __init__(self, chickens, n_steps: int, variant: ModelVariant):
        if not chickens:
            raise ValueError("need at least one chicken")
        self.state_space = SIR_STATES
        self.coupling_state = int(EpiState.INFECTIOUS)
        self.chickens = list(chickens)
        self.n_chains = len(self.chickens)
        self.n_steps = int(n_steps)
        self.variant = variant
        self.pen_of_chain = np.array([c.pen for c in self.chickens], dtype=np.int32)
        self.cls_of_chain = np.array([1 if c.transgenic else 0 for c in self.chickens],
                                     dtype=np.int32)
        self.present = np.stack([c.present[: self.n_steps] for c in self.chickens])
        if self.present.shape != (self.n_chains, self.n_steps):
            raise ValueError("presence windows must span all %d steps" % self.n_steps)
        n_pens = int(self.pen_of_chain.max()) + 1
        self.pen_sizes = np.bincount(self.pen_of_chain, minlength=n_pens)
        for c in self.chickens:
            if c.pen_size != self.pen_sizes[c.pen]:
                raise ValueError("chicken pen_size disagrees with the pen roster")
        self.pen_offsets()  # validates contiguity

    def initial_row(self, k: int, params: SirParams) -> np.ndarray:
        return initial_distribution(self.chickens[k], params)

    def transition_row(self, k: int, t: int, from_state: int,
                       counts, params: SirParams) -> np.ndarray:
        chick = self.chickens[k]
        a = force_of_infection(counts, chick, params)
        gamma = params.gamma_t if chick.transgenic else params.gamma_n
        return half_day_transition_matrix(a, gamma)[from_state]

    def emission_row(self, k: int, t: int, symbol: int, params) -> np.ndarray:
        return emission_row(symbol)

    def prior_log_density(self, params: SirParams) -> float:
        return prior_log_density(params, self.variant)

    def transition_tables(self, params: SirParams) -> np.ndarray:
        nmax = int(self.pen_sizes.max())
        grid = np.arange(nmax + 1, dtype=float)
        i_n, i_t = np.meshgrid(grid, grid, indexing="ij")
        tables = np.empty((self.n_pens, 2, nmax + 1, nmax + 1, 3, 3))
        for p in range(self.n_pens):
            n = float(self.pen_sizes[p])
            pressure = (params.beta_n * i_n + params.beta_t * i_t) / n
            for c, (nu, gamma) in enumerate([(params.nu_n, params.gamma_n),
                                             (1.0, params.gamma_t)]):
                tables[p, c] = half_day_transition_matrices(nu * pressure, gamma)
        return tables
