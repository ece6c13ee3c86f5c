"""Pseudo-strata learning: revenue-optimal approximations to principal strata.

The package estimates principal-strata probabilities and stratum-specific
revenue means from treatment/response/revenue data, builds the
reward-maximising pseudo-strata classifier, and evaluates the resulting
treatment policies.
"""

__version__ = "0.1.0"

from .core import (AffineCost, CostSpec, Dataset, DatasetError, Observation, OddsRatioSpec,
                   RewardMatrix, StratumLabel, label_policy_order, read_csv, validate_dataset,
                   write_csv)
from .decision import (DecisionRule, GridSpec, PolicyEvaluation, classify_bayes,
                       classify_posterior_mode, direct_policy_search, evaluate_partition_reward,
                       misclassification_probability, misclassification_table, principal_effect,
                       reward_matrix, treatment_rule, value_function)
from .inference import (BootstrapResult, SensitivityGrid, bootstrap, convergence_diagnostic,
                        sensitivity_sweep)
from .outcome import (MomentSystem, OutcomeModel, check_identification, evaluate_outcome,
                      fit_outcome_models)
from .pipeline import FittedPipeline, PipelineConfig, fit_pipeline
from .simulation import (LabeledDataset, Population, SimulationConfig, classification_accuracy,
                         generate, policy_revenue, run_experiment)
from .strata import (ClosedFormStrataModel, MultinomialStrataModel, ResponseRateModel, em_fit,
                     fit_response_rates, pi11_closed_form, predict_strata, strata_from_margins)
