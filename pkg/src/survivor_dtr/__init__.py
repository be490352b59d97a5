"""Always-survivor value estimation and learning for two-stage dynamic treatment regimes
under censoring and truncation by death."""

from .errors import (ArmNotFitted, DimensionMismatch, EmptyStratum, MonotoneViolation, NonpositiveDenominator,
                     ParseError, SurvivorDTRError, ZeroOmega)
from .estimators import EifTerms, EstimateReport, eif, eif_terms, eif_variance, phi_d, phi_n, principal_score, \
    v_aipw, v_ipw, v_mr, v_q_plugin
from .nuisance import NuisanceSuite, ScenarioSpec, evaluate, fit_policy_outcome, fit_suite
from .policy import DEConfig, LearnResult, LinearPolicy, learn, pcd_as, true_optimal_policy
from .sensitivity import SensitivityParams, omega_weights, sensitivity_grid, v_sensitivity
from .simulation import SimConfig, run_ope_experiment, run_opl_experiment, simulate, true_suite, true_value
from .trajectory import Dataset, StagedData, Trajectory, read_csv, validate, write_csv

__version__ = "0.1.0"

__all__ = [
    "ArmNotFitted", "DimensionMismatch", "EmptyStratum", "MonotoneViolation", "NonpositiveDenominator",
    "ParseError", "SurvivorDTRError", "ZeroOmega",
    "EifTerms", "EstimateReport", "eif", "eif_terms", "eif_variance", "phi_d", "phi_n", "principal_score",
    "v_aipw", "v_ipw", "v_mr", "v_q_plugin",
    "NuisanceSuite", "ScenarioSpec", "evaluate", "fit_policy_outcome", "fit_suite",
    "DEConfig", "LearnResult", "LinearPolicy", "learn", "pcd_as", "true_optimal_policy",
    "SensitivityParams", "omega_weights", "sensitivity_grid", "v_sensitivity",
    "SimConfig", "run_ope_experiment", "run_opl_experiment", "simulate", "true_suite", "true_value",
    "Dataset", "StagedData", "Trajectory", "read_csv", "validate", "write_csv",
    "__version__",
]
