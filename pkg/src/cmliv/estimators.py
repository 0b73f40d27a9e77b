"""Moment-based IV estimators for the partially linear model.

All five estimators solve a single just-identified moment
``mean(w * (a - theta * b) * kappa) = 0`` and differ only in the instrument
``kappa`` and in whether ``(a, b)`` are residualized:

========  ===============================  ==========
id        instrument                       (a, b)
========  ===============================  ==========
cml       p(Z1,X) - E[D|X]                 residuals
cml-dc    p(Z1,X) - m_dc(X)                residuals
dml       Z1 - E[Z1|X]                     residuals
cs        (p(1,X) - p(0,X)) (Z1 - mean Z1)  residuals
ai        p(Z1,X) - E[D|X]                 raw (y, d)
========  ===============================  ==========
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.stats import norm

from cmliv.core import Z_95, EstimateReport, FoldPlan, IvDataset, NuisanceFit, is_binary
from cmliv.errors import (
    InvalidConfigurationError,
    UnsupportedInstrumentError,
    WeakIdentificationError,
)
from cmliv.learners import (
    RegressorSpec,
    cross_fit,
    double_cross_fit_m,
    pscore_with_counterfactuals,
)

ESTIMATORS = ("cml", "cml-dc", "dml", "cs", "ai")
TOL_REL = 1e-10

_MODES = {"iid": "iid-sandwich", "iid-sandwich": "iid-sandwich",
          "cluster": "cluster-robust", "cluster-robust": "cluster-robust"}

_NEEDS = {
    "cml": ("eta1", "eta2", "pscore"),
    "cml-dc": ("eta1", "eta2", "pscore", "m_dc"),
    "dml": ("eta1", "eta2", "eta_z"),
    "cs": ("eta1", "eta2", "pscore_cf0", "pscore_cf1"),
    "ai": ("eta2", "pscore"),
}


@dataclass(frozen=True)
class VarianceOptions:
    """How standard errors are computed.

    ``mode`` is ``"iid-sandwich"`` or ``"cluster-robust"`` (``"iid"`` and
    ``"cluster"`` are accepted). Weights in the dataset are always used when
    present. ``literal_denominator`` swaps the Jacobian for ``mean(kappa)**2``
    and exists only for comparison; it is near zero by construction.
    """

    mode: str = "iid-sandwich"
    level: float = 0.95
    literal_denominator: bool = False

    def __post_init__(self):
        if self.mode not in _MODES:
            raise InvalidConfigurationError(f"unknown variance mode {self.mode!r}")
        object.__setattr__(self, "mode", _MODES[self.mode])
        if not 0.0 <= self.level < 1.0:
            raise InvalidConfigurationError("confidence level must lie in [0, 1)")

    @property
    def critical_value(self) -> float:
        if self.level == 0.95:
            return Z_95
        return float(norm.ppf(0.5 + self.level / 2))


def _check_id(estimator_id: str) -> str:
    if estimator_id not in ESTIMATORS:
        raise InvalidConfigurationError(
            f"unknown estimator {estimator_id!r}; choose from {', '.join(ESTIMATORS)}"
        )
    return estimator_id


def _require(nf: NuisanceFit, names: Iterable[str], what: str) -> None:
    missing = [k for k in names if getattr(nf, k) is None]
    if missing:
        raise InvalidConfigurationError(f"{what} needs nuisances {', '.join(missing)}")


def residualize(ds: IvDataset, nf: NuisanceFit):
    """Return ``(y - eta1, d - eta2)``."""
    _require(nf, ("eta1", "eta2"), "residualize")
    nf.check_length(ds.n)
    return ds.y - nf.eta1, ds.d - nf.eta2


def build_instrument(ds: IvDataset, nf: NuisanceFit, estimator_id: str) -> np.ndarray:
    """Per-observation instrument values for ``estimator_id``."""
    eid = _check_id(estimator_id)
    if eid == "cs" and not is_binary(ds.z1):
        raise UnsupportedInstrumentError("the cs estimator needs a binary z1")
    _require(nf, [k for k in _NEEDS[eid] if k != "eta1"], eid)
    nf.check_length(ds.n)
    if eid in ("cml", "ai"):
        kappa = nf.pscore - nf.eta2
    elif eid == "cml-dc":
        kappa = nf.pscore - nf.m_dc
    elif eid == "dml":
        kappa = ds.z1 - nf.eta_z
    else:
        kappa = (nf.pscore_cf1 - nf.pscore_cf0) * (ds.z1 - ds.z1.mean())
    if not np.any(kappa != 0):
        raise WeakIdentificationError(0.0, 0.0, eid)
    return kappa


def _normalized_weights(ds: IvDataset) -> np.ndarray:
    if ds.weight is None:
        return np.ones(ds.n)
    return ds.weight / ds.weight.mean()


def _sandwich(score, w, kappa, jac, clusters, vopts):
    n = score.shape[0]
    n_clusters = None
    if vopts.mode == "cluster-robust":
        if clusters is None:
            raise InvalidConfigurationError("cluster-robust variance needs cluster labels")
        _, inv = np.unique(np.asarray(clusters), return_inverse=True)
        sums = np.bincount(inv.ravel(), weights=score)
        meat = np.sum(sums ** 2) / n
        n_clusters = int(sums.shape[0])
    else:
        meat = np.mean(score ** 2)
    bread = np.mean(w * kappa) ** 2 if vopts.literal_denominator else jac ** 2
    variance = float(meat / bread) if bread > 0 else float("inf")
    return variance, n_clusters


def moment_estimate(a, b, kappa, *, weights=None, clusters=None,
                    vopts: Optional[VarianceOptions] = None, estimator_id: str = "",
                    d_scale: Optional[float] = None) -> EstimateReport:
    """Solve ``mean(w (a - theta b) kappa) = 0`` and attach sandwich inference.

    ``d_scale`` sets the spread of the treatment used in the weak-identification
    tolerance; it defaults to the standard deviation of ``b``.
    """
    vopts = vopts or VarianceOptions()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    n = a.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    jac = np.mean(w * b * kappa)
    sd_d = np.std(b) if d_scale is None else d_scale
    tol = TOL_REL * sd_d * np.std(kappa)
    if not abs(jac) > tol:
        raise WeakIdentificationError(jac, tol, estimator_id)
    theta = np.mean(w * a * kappa) / jac

    variance, n_clusters = _sandwich(w * (a - theta * b) * kappa, w, kappa, jac,
                                     clusters, vopts)
    se = float(np.sqrt(variance / n))
    half = vopts.critical_value * se
    return EstimateReport(estimator_id=estimator_id, theta=float(theta), variance=float(variance),
                          std_error=se, ci_lower=float(theta - half), ci_upper=float(theta + half),
                          n=n, denominator=float(jac), n_clusters=n_clusters)


def _moment_inputs(ds: IvDataset, nf: NuisanceFit, estimator_id: str):
    kappa = build_instrument(ds, nf, estimator_id)
    if estimator_id == "ai":
        return ds.y, ds.d, kappa
    a, b = residualize(ds, nf)
    return a, b, kappa


def estimate(ds: IvDataset, nf: NuisanceFit, estimator_id: str,
             vopts: Optional[VarianceOptions] = None) -> EstimateReport:
    """Point estimate, variance and confidence interval for one estimator."""
    a, b, kappa = _moment_inputs(ds, nf, _check_id(estimator_id))
    return moment_estimate(a, b, kappa, weights=_normalized_weights(ds), clusters=ds.cluster,
                           vopts=vopts, estimator_id=estimator_id, d_scale=float(np.std(ds.d)))


def ratio_estimate(ds: IvDataset, nf: NuisanceFit, estimator_id: str) -> float:
    """The bare ratio ``sum(w a kappa) / sum(w b kappa)`` with no identification guard.

    Used to report untrimmed Monte Carlo summaries; returns ``inf`` or ``nan``
    when the denominator is exactly zero.
    """
    a, b, kappa = _moment_inputs(ds, nf, _check_id(estimator_id))
    w = _normalized_weights(ds)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(w * a * kappa) / np.sum(w * b * kappa))


def variance_estimate(ds: IvDataset, nf: NuisanceFit, estimator_id: str, theta_tilde: float,
                      vopts: Optional[VarianceOptions] = None):
    """Sandwich ``(variance, std_error)`` evaluated at a preliminary ``theta_tilde``."""
    vopts = vopts or VarianceOptions()
    a, b, kappa = _moment_inputs(ds, nf, _check_id(estimator_id))
    w = _normalized_weights(ds)
    jac = np.mean(w * b * kappa)
    tol = TOL_REL * np.std(ds.d) * np.std(kappa)
    if not abs(jac) > tol:
        raise WeakIdentificationError(jac, tol, estimator_id)
    variance, _ = _sandwich(w * (a - theta_tilde * b) * kappa, w, kappa, jac,
                            ds.cluster, vopts)
    return variance, float(np.sqrt(variance / ds.n))


def fit_nuisances(ds: IvDataset, plan: FoldPlan, spec: RegressorSpec,
                  requested: Iterable[str]) -> NuisanceFit:
    """Cross-fit exactly the nuisances the requested estimators need."""
    requested = [_check_id(e) for e in requested]
    need = set()
    for e in requested:
        need.update(_NEEDS[e])
    if "cs" in requested and not is_binary(ds.z1):
        raise UnsupportedInstrumentError("the cs estimator needs a binary z1")

    out = {}
    if "eta1" in need:
        out["eta1"] = cross_fit(ds, plan, spec, "y-on-x")
    if "eta2" in need:
        out["eta2"] = cross_fit(ds, plan, spec, "d-on-x")
    if "eta_z" in need:
        out["eta_z"] = cross_fit(ds, plan, spec, "z1-on-x")
    want_cf = "pscore_cf0" in need
    if "pscore" in need or want_cf:
        p, p0, p1 = pscore_with_counterfactuals(ds, plan, spec, counterfactual=want_cf)
        if "pscore" in need:
            out["pscore"] = p
        if want_cf:
            out["pscore_cf0"], out["pscore_cf1"] = p0, p1
    if "m_dc" in need:
        out["m_dc"] = double_cross_fit_m(ds, plan, spec)
    return NuisanceFit(d_binary=is_binary(ds.d), **out)


def estimate_all(ds: IvDataset, plan: FoldPlan, spec: RegressorSpec, requested: Iterable[str],
                 vopts: Optional[VarianceOptions] = None) -> dict[str, EstimateReport]:
    """Fit shared nuisances once, then run each requested estimator.

    Errors from any estimator propagate; callers wanting per-estimator
    failure handling should call :func:`fit_nuisances` and :func:`estimate`.
    """
    requested = list(dict.fromkeys(requested))
    nf = fit_nuisances(ds, plan, spec, requested)
    return {e: estimate(ds, nf, e, vopts) for e in requested}
