"""First-stage learners and the cross-fitting engines."""

from cmliv.learners.crossfit import (
    counterfactual_pscores,
    cross_fit,
    derive_seed,
    double_cross_fit_m,
    double_cross_fit_splits,
    pscore_with_counterfactuals,
)
from cmliv.learners.regressors import (
    KINDS,
    TARGETS,
    FittedRegressor,
    RegressorSpec,
    fit,
    predict,
)

__all__ = [
    "KINDS", "TARGETS", "FittedRegressor", "RegressorSpec", "fit", "predict",
    "cross_fit", "counterfactual_pscores", "double_cross_fit_m",
    "double_cross_fit_splits", "pscore_with_counterfactuals", "derive_seed",
]
