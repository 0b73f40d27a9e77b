"""Regressor specifications and the fit/predict contract."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from cmliv.dgp import DgpConfig, OracleNuisances
from cmliv.errors import FitError, InvalidConfigurationError, PredictionError
from cmliv.learners.forest import ForestModel, fit_forest

KINDS = ("ridge-expanded", "knn", "random-forest", "oracle")
_ALIASES = {"ridge": "ridge-expanded", "rf": "random-forest", "forest": "random-forest"}
_LABELS = {"ridge-expanded": "ridge", "knn": "knn", "random-forest": "rf", "oracle": "oracle"}

TARGETS = ("y-on-x", "d-on-x", "d-on-z1x", "z1-on-x")


@dataclass(frozen=True)
class RegressorSpec:
    """Learner kind plus its hyperparameters.

    Only the fields of the chosen ``kind`` matter: ``penalty``/``degree`` for
    ridge on a polynomial expansion, ``neighbors`` for k-nearest-neighbours,
    ``n_trees``/``max_depth``/``min_leaf``/``mtry`` for the random forest and
    ``dgp`` for the oracle. ``seed`` drives all learner randomness.
    """

    kind: str = "random-forest"
    penalty: float = 1.0
    degree: int = 2
    neighbors: int = 25
    n_trees: int = 200
    max_depth: Optional[int] = None
    min_leaf: int = 5
    mtry: Optional[int] = None
    seed: int = 0
    dgp: Optional[DgpConfig] = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise InvalidConfigurationError(f"unknown learner kind {self.kind!r}")
        if self.penalty < 0:
            raise InvalidConfigurationError("ridge penalty must be >= 0")
        if self.degree < 1:
            raise InvalidConfigurationError("expansion degree must be >= 1")
        if self.neighbors < 1:
            raise InvalidConfigurationError("neighbour count must be >= 1")
        if self.n_trees < 1:
            raise InvalidConfigurationError("tree count must be >= 1")
        if self.min_leaf < 1:
            raise InvalidConfigurationError("min leaf size must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidConfigurationError("max depth must be >= 0")
        if self.mtry is not None and self.mtry < 1:
            raise InvalidConfigurationError("features per split must be >= 1")
        if kind == "oracle" and self.dgp is None:
            raise InvalidConfigurationError("oracle learner needs a DgpConfig")

    @property
    def label(self) -> str:
        return _LABELS[self.kind]

    def with_seed(self, seed: int) -> "RegressorSpec":
        return replace(self, seed=int(seed))


class FittedRegressor:
    """Immutable fitted state; call :func:`predict` on it."""

    def __init__(self, spec: RegressorSpec, n_features: int, model):
        self.spec = spec
        self.n_features = n_features
        self._model = model

    def predict(self, features) -> np.ndarray:
        return predict(self, features)


# ---------------------------------------------------------------------------

class _Standardizer:
    def __init__(self, X, w):
        self.mean = np.average(X, axis=0, weights=w)
        sd = np.sqrt(np.average((X - self.mean) ** 2, axis=0, weights=w))
        self.sd = np.where(sd > 0, sd, 1.0)

    def __call__(self, X):
        return (X - self.mean) / self.sd


def _expand(Z, degree):
    cols = [np.ones(Z.shape[0])]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(Z.shape[1]), deg):
            cols.append(np.prod(Z[:, combo], axis=1))
    return np.column_stack(cols)


class _Ridge:
    def __init__(self, spec, X, y, w):
        self.scale = _Standardizer(X, w)
        self.degree = spec.degree
        A = _expand(self.scale(X), spec.degree)
        sw = np.sqrt(w)
        lhs = A * sw[:, None]
        rhs = y * sw
        if spec.penalty > 0:
            # intercept column stays unpenalized
            pen = math.sqrt(spec.penalty) * np.eye(A.shape[1])[1:]
            lhs = np.vstack([lhs, pen])
            rhs = np.concatenate([rhs, np.zeros(pen.shape[0])])
        self.coef = np.linalg.lstsq(lhs, rhs, rcond=None)[0]

    def predict(self, X):
        return _expand(self.scale(X), self.degree) @ self.coef


class _Knn:
    def __init__(self, spec, X, y, w):
        self.scale = _Standardizer(X, None)
        self.tree = cKDTree(self.scale(X))
        self.k = min(spec.neighbors, X.shape[0])
        self.y = y
        self.w = w

    def predict(self, X):
        _, nb = self.tree.query(self.scale(X), k=self.k)
        nb = np.asarray(nb).reshape(X.shape[0], self.k)
        wy = self.w[nb]
        tot = wy.sum(axis=1)
        num = (wy * self.y[nb]).sum(axis=1)
        plain = self.y[nb].mean(axis=1)
        return np.where(tot > 0, num / np.where(tot > 0, tot, 1.0), plain)


class _Oracle:
    def __init__(self, spec, target):
        if target not in TARGETS:
            raise FitError(f"oracle learner needs a target in {TARGETS}, got {target!r}")
        self.truth = OracleNuisances(spec.dgp)
        self.target = target

    def predict(self, X):
        if self.target == "d-on-z1x":
            return self.truth.pscore(X[:, 0], X[:, 1])
        x1 = X[:, 0]
        if self.target == "y-on-x":
            return self.truth.eta_y(x1)
        if self.target == "d-on-x":
            return self.truth.eta_d(x1)
        return self.truth.eta_z(x1)


def fit(spec: RegressorSpec, features, targets, weights=None,
        target: Optional[str] = None) -> FittedRegressor:
    """Fit a regressor of kind ``spec.kind``.

    ``target`` names the conditional expectation being learned (one of
    ``TARGETS``); only the oracle learner uses it.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise FitError("need at least one row and one feature column")
    if X.shape[0] != y.shape[0]:
        raise FitError(f"{X.shape[0]} feature rows but {y.shape[0]} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise FitError("non-finite values in training data")
    if weights is None:
        w = np.ones(y.shape[0])
    else:
        w = np.asarray(weights, dtype=float).ravel()
        if w.shape[0] != y.shape[0] or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise FitError("weights must be finite, non-negative and match the targets")
        if not np.any(w > 0):
            raise FitError("all training weights are zero")

    if spec.kind == "ridge-expanded":
        model = _Ridge(spec, X, y, w)
    elif spec.kind == "knn":
        model = _Knn(spec, X, y, w)
    elif spec.kind == "random-forest":
        mtry = spec.mtry if spec.mtry is not None else math.ceil(X.shape[1] / 3)
        model = fit_forest(X, y, w, n_trees=spec.n_trees, min_leaf=spec.min_leaf,
                           max_depth=spec.max_depth, mtry=min(mtry, X.shape[1]),
                           seed=spec.seed)
    else:
        model = _Oracle(spec, target)
    return FittedRegressor(spec, X.shape[1], model)


def predict(fr: FittedRegressor, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != fr.n_features:
        raise PredictionError(
            f"regressor was fitted on {fr.n_features} columns, got {X.shape[1]}"
        )
    out = np.asarray(fr._model.predict(X), dtype=float)
    if not np.all(np.isfinite(out)):
        raise PredictionError("non-finite predictions (features outside the model's support?)")
    return out


__all__ = ["RegressorSpec", "FittedRegressor", "ForestModel", "TARGETS", "KINDS",
           "fit", "predict"]
