"""Effect estimation for clustered randomized trials with partial service receipt.

The package estimates intention-to-treat and complier-average effects by
reweighting one randomized arm to match receipt-defined subpopulations,
with cluster-robust sandwich standard errors that account for the weights
having been estimated.
"""

from cace_ipw.data import ColumnSchema, DataError, Dataset, ValidationReport, load_dataset, validate
from cace_ipw.logit import FitError, LogitFit, PropensityVector, fit_logit, logit_residuals, predict_propensity
from cace_ipw.weights import (
    EstimandKind,
    StrataShares,
    WeightVector,
    build_weights,
    estimate_strata_shares,
    weight_balance_summary,
)
from cace_ipw.wls import RankDeficiencyError, WlsFit, fit_wls, wls_treatment_effect
from cace_ipw.simulation import (
    CalibrationError,
    MetricsTable,
    Scenario,
    SimulatedTrial,
    StudyError,
    TrueEffects,
    calibrate_scenario,
    generate_trial,
    run_study,
    true_estimands,
)
from cace_ipw.estimators import (
    EstimateResult,
    EstimationError,
    StrataEffects,
    decompose_strata_effects,
    estimate_cace_t,
    estimate_cace_t_iv,
    estimate_cace_tc_ipw,
    estimate_cace_tc_ratio,
    estimate_itt,
    estimate_tau11,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "ColumnSchema",
    "DataError",
    "Dataset",
    "EstimandKind",
    "EstimateResult",
    "EstimationError",
    "FitError",
    "LogitFit",
    "MetricsTable",
    "PropensityVector",
    "RankDeficiencyError",
    "Scenario",
    "SimulatedTrial",
    "StrataEffects",
    "StrataShares",
    "StudyError",
    "TrueEffects",
    "ValidationReport",
    "WeightVector",
    "WlsFit",
    "build_weights",
    "calibrate_scenario",
    "decompose_strata_effects",
    "estimate_cace_t",
    "estimate_cace_t_iv",
    "estimate_cace_tc_ipw",
    "estimate_cace_tc_ratio",
    "estimate_itt",
    "estimate_strata_shares",
    "estimate_tau11",
    "fit_logit",
    "fit_wls",
    "generate_trial",
    "load_dataset",
    "run_study",
    "true_estimands",
    "logit_residuals",
    "predict_propensity",
    "validate",
    "weight_balance_summary",
    "wls_treatment_effect",
]
