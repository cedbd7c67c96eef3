"""Model evidence for coupled hidden Markov models with count coupling."""

from .core import (MISSING, ChainGrouping, ChmmModel, CompiledChmm,
                   HiddenTrajectories, ObservationGrid, StateSpace,
                   SummaryStatistics, ZeroSupportError, compute_summaries,
                   log_complete_density, log_sum_exp)
from .evidence import (EvidenceConfig, EvidenceEstimate, RankingTable,
                       bayes_factor_table, compare_methods, estimate_evidence)
from .exact import (FilterBudgetError, exact_smoothing_marginals,
                    joint_ffbs_sample, joint_forward_filter)
from .iffbs import (ChainConditional, GuidingEnsemble, generate_guiding_samples,
                    iffbs_chain_update, iffbs_sweep, initial_trajectory,
                    modified_forward_pass)
from .mcmc import DefenseMixture, fit_defense_mixture, mcmc_joint
from .pf import pf_loglik
from .proposals import (ProposalDraw, diffbs_propose, ess, miffbs_propose,
                        regenerate, select_high_posterior)
from .sir import (ChickenMeta, EpiState, ModelVariant, SirModel, SirObservation,
                  SirParams, force_of_infection, half_day_transition_matrix,
                  initial_distribution, scaling_study_params)
from .simulate import (ExperimentDesign, PenSpec, preset_designs,
                       simulate_experiment)

__version__ = "0.1.0"
