"""Debiased instrumental-variable estimators for the partially linear model."""

from cmliv.core import (
    EstimateReport,
    FoldPlan,
    IvDataset,
    NuisanceFit,
    ValidationReport,
    make_fold_plan,
    validate_dataset,
)
from cmliv.dgp import (
    PRESETS,
    DgpConfig,
    Estimands,
    closed_form_estimands,
    draw_sample,
    estimands,
    exact_estimands,
    mc_estimand_oracle,
    preset,
)
from cmliv.estimators import (
    ESTIMATORS,
    VarianceOptions,
    build_instrument,
    estimate,
    estimate_all,
    fit_nuisances,
    residualize,
    variance_estimate,
)
from cmliv.learners import RegressorSpec, cross_fit, fit, predict

__version__ = "0.1.0"

__all__ = [
    "EstimateReport", "FoldPlan", "IvDataset", "NuisanceFit", "ValidationReport",
    "make_fold_plan", "validate_dataset",
    "PRESETS", "DgpConfig", "Estimands", "closed_form_estimands", "draw_sample",
    "estimands", "exact_estimands", "mc_estimand_oracle", "preset",
    "ESTIMATORS", "VarianceOptions", "build_instrument", "estimate", "estimate_all",
    "fit_nuisances", "residualize", "variance_estimate",
    "RegressorSpec", "cross_fit", "fit", "predict",
]
