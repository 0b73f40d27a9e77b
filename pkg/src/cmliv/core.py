"""Domain types shared by every module: datasets, fold plans, nuisances, reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from cmliv.errors import DatasetError, InvalidConfigurationError

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

Z_95 = 1.959964
PSCORE_CLAMP = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def is_binary(v: np.ndarray) -> bool:
    """True iff every entry is exactly 0.0 or 1.0."""
    v = np.asarray(v, dtype=float)
    return v.size > 0 and bool(np.all((v == 0.0) | (v == 1.0)))


@dataclass(frozen=True)
class IvDataset:
    """Observed sample ``(y, d, z1, x)`` with optional weights and clusters.

    Arrays are copied and made read-only on construction. Construction does
    not enforce the invariants; use :func:`validate_dataset` for that, so an
    invalid file can still be loaded and reported on.
    """

    y: FloatArray
    d: FloatArray
    z1: FloatArray
    x: FloatArray
    weight: Optional[FloatArray] = None
    cluster: Optional[IntArray] = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "y", _frozen(np.asarray(self.y, dtype=float).ravel()))
        set_(self, "d", _frozen(np.asarray(self.d, dtype=float).ravel()))
        set_(self, "z1", _frozen(np.asarray(self.z1, dtype=float).ravel()))
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        set_(self, "x", _frozen(x))
        if self.weight is not None:
            set_(self, "weight", _frozen(np.asarray(self.weight, dtype=float).ravel()))
        if self.cluster is not None:
            set_(self, "cluster", _frozen(np.asarray(self.cluster, dtype=np.int64).ravel()))

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def k(self) -> int:
        return int(self.x.shape[1])

    def features(self, with_instrument: bool = False) -> FloatArray:
        """Covariate matrix, optionally with ``z1`` prepended as column 0."""
        if with_instrument:
            return np.column_stack([self.z1, self.x])
        return np.asarray(self.x)

    def replace(self, **changes) -> "IvDataset":
        fields = dict(y=self.y, d=self.d, z1=self.z1, x=self.x,
                      weight=self.weight, cluster=self.cluster)
        fields.update(changes)
        return IvDataset(**fields)

    def take(self, rows) -> "IvDataset":
        rows = np.asarray(rows)
        return IvDataset(
            y=self.y[rows], d=self.d[rows], z1=self.z1[rows], x=self.x[rows],
            weight=None if self.weight is None else self.weight[rows],
            cluster=None if self.cluster is None else self.cluster[rows],
        )


@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)
    d_binary: bool = False
    z1_binary: bool = False

    @property
    def ok(self) -> bool:
        return not self.problems

    def raise_if_invalid(self) -> None:
        if self.problems:
            raise DatasetError("; ".join(self.problems))


_COLUMN_NAMES = {"y": "outcome", "d": "treatment", "z1": "instrument",
                 "x": "covariate", "weight": "weight", "cluster": "cluster"}


def validate_dataset(ds: IvDataset) -> ValidationReport:
    """List every invariant violation of ``ds`` (empty list iff valid).

    Also flags whether ``d`` and ``z1`` are binary, which decides estimator
    eligibility downstream.
    """
    report = ValidationReport()
    n = ds.y.shape[0]
    if n < 1:
        report.problems.append("dataset has no rows")
    columns = {"y": ds.y, "d": ds.d, "z1": ds.z1, "x": ds.x}
    if ds.weight is not None:
        columns["weight"] = ds.weight
    if ds.cluster is not None:
        columns["cluster"] = ds.cluster
    for name, col in columns.items():
        if col.shape[0] != n:
            report.problems.append(
                f"length mismatch: column {name} has {col.shape[0]} rows, y has {n}"
            )
    if ds.x.ndim != 2 or ds.x.shape[1] < 1:
        report.problems.append("covariate matrix needs at least one column")

    for name, col in columns.items():
        if name == "cluster":
            continue
        bad = ~np.isfinite(col)
        if col.ndim == 2:
            bad = bad.any(axis=1)
        for i in np.flatnonzero(bad)[:5]:
            report.problems.append(f"non-finite {_COLUMN_NAMES[name]} at row {int(i)}")
        if bad.sum() > 5:
            report.problems.append(
                f"non-finite {_COLUMN_NAMES[name]} in {int(bad.sum())} rows in total"
            )

    if ds.weight is not None and np.all(np.isfinite(ds.weight)):
        if np.any(ds.weight < 0):
            i = int(np.flatnonzero(ds.weight < 0)[0])
            report.problems.append(f"negative weight at row {i}")
        if not np.any(ds.weight > 0):
            report.problems.append("all weights are zero")

    report.d_binary = is_binary(ds.d)
    report.z1_binary = is_binary(ds.z1)
    return report


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of each observation to one of ``L`` cross-fitting folds."""

    assignment: IntArray
    L: int

    def __post_init__(self):
        object.__setattr__(self, "assignment",
                           _frozen(np.asarray(self.assignment, dtype=np.int64)))

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])

    def fold(self, ell: int) -> IntArray:
        """Row indices in fold ``ell`` (ascending)."""
        return np.flatnonzero(self.assignment == ell)

    def complement(self, ell: int) -> IntArray:
        """Row indices outside fold ``ell`` (ascending)."""
        return np.flatnonzero(self.assignment != ell)

    def sizes(self) -> IntArray:
        return np.bincount(self.assignment, minlength=self.L)


def make_fold_plan(n: int, L: int, seed: int) -> FoldPlan:
    """Random partition of ``range(n)`` into ``L`` folds of near-equal size.

    Fold sizes differ by at most one; the plan is a deterministic function of
    ``(n, L, seed)``.
    """
    if L < 2 or L > n:
        raise InvalidConfigurationError(f"need n >= L >= 2, got n={n}, L={L}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    assignment[rng.permutation(n)] = np.arange(n) % L
    return FoldPlan(assignment=assignment, L=L)


@dataclass(frozen=True)
class NuisanceFit:
    """Out-of-fold predictions of the conditional expectations.

    ``eta1 = E[Y|X]``, ``eta2 = E[D|X]``, ``pscore = E[D|Z1,X]``,
    ``eta_z = E[Z1|X]``, ``pscore_cf0/1 = p(0,X), p(1,X)`` and ``m_dc`` the
    double cross-fitted ``E[p(Z1,X)|X]``. When ``d_binary`` is set, the
    propensity predictions are clamped to ``[1e-6, 1 - 1e-6]``.
    """

    eta1: Optional[FloatArray] = None
    eta2: Optional[FloatArray] = None
    pscore: Optional[FloatArray] = None
    eta_z: Optional[FloatArray] = None
    pscore_cf0: Optional[FloatArray] = None
    pscore_cf1: Optional[FloatArray] = None
    m_dc: Optional[FloatArray] = None
    d_binary: bool = False

    def __post_init__(self):
        for name in ("eta1", "eta2", "pscore", "eta_z", "pscore_cf0", "pscore_cf1", "m_dc"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float).ravel()
            if not np.all(np.isfinite(v)):
                raise DatasetError(f"nuisance {name} contains non-finite values")
            if self.d_binary and name in ("pscore", "pscore_cf0", "pscore_cf1"):
                v = np.clip(v, PSCORE_CLAMP, 1.0 - PSCORE_CLAMP)
            object.__setattr__(self, name, _frozen(v))

    def check_length(self, n: int) -> None:
        for name in ("eta1", "eta2", "pscore", "eta_z", "pscore_cf0", "pscore_cf1", "m_dc"):
            v = getattr(self, name)
            if v is not None and v.shape[0] != n:
                raise DatasetError(f"nuisance {name} has length {v.shape[0]}, expected {n}")


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with sandwich inference for one estimator run.

    ``variance`` estimates the asymptotic variance of ``sqrt(n)(theta - theta0)``;
    ``std_error`` is on the scale of ``theta``. ``denominator`` is the empirical
    moment Jacobian ``(1/n) sum w_i b_i kappa_i``, kept as a relevance
    diagnostic.
    """

    estimator_id: str
    theta: float
    variance: float
    std_error: float
    ci_lower: float
    ci_upper: float
    n: int
    denominator: float
    n_clusters: Optional[int] = None

    def covers(self, value: float) -> bool:
        return self.ci_lower <= value <= self.ci_upper

    def as_record(self) -> dict:
        return {
            "estimator": self.estimator_id,
            "theta": self.theta,
            "std_error": self.std_error,
            "variance": self.variance,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "n": self.n,
            "denominator": self.denominator,
            "n_clusters": self.n_clusters,
        }
