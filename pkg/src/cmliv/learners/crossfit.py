"""Cross-fitting and double cross-fitting of nuisance regressions.

Every fit for fold ``l`` sees only rows outside ``l``. Learner seeds are
derived from ``(spec.seed, target, fold)`` so results do not depend on the
order in which folds are processed.
"""

from __future__ import annotations

import numpy as np

from cmliv.core import FoldPlan, IvDataset, is_binary
from cmliv.errors import CrossFitError, UnsupportedInstrumentError
from cmliv.learners.regressors import TARGETS, RegressorSpec, fit, predict

_DC_KEY = 97


def derive_seed(*keys: int) -> int:
    """Counter-style seed derivation: a hash of the integer key tuple."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _check(ds: IvDataset, plan: FoldPlan) -> None:
    if plan.n != ds.n:
        raise CrossFitError(f"fold plan covers {plan.n} rows, dataset has {ds.n}")


def _design(ds: IvDataset, target: str):
    if target == "y-on-x":
        return ds.x, ds.y
    if target == "d-on-x":
        return ds.x, ds.d
    if target == "d-on-z1x":
        return ds.features(with_instrument=True), ds.d
    if target == "z1-on-x":
        return ds.x, ds.z1
    raise CrossFitError(f"unknown cross-fit target {target!r}; choose from {TARGETS}")


def _weights(ds, rows):
    return None if ds.weight is None else ds.weight[rows]


def _fold_models(ds: IvDataset, plan: FoldPlan, spec: RegressorSpec, target: str):
    _check(ds, plan)
    X, t = _design(ds, target)
    key = TARGETS.index(target)
    for ell in range(plan.L):
        test = plan.fold(ell)
        train = plan.complement(ell)
        if train.size == 0:
            raise CrossFitError(f"fold {ell} has an empty training complement")
        model = fit(spec.with_seed(derive_seed(spec.seed, key, ell)), X[train], t[train],
                    _weights(ds, train), target=target)
        yield test, model, X


def cross_fit(ds: IvDataset, plan: FoldPlan, spec: RegressorSpec, target: str) -> np.ndarray:
    """Out-of-fold predictions of the conditional expectation named by ``target``.

    ``y-on-x``, ``d-on-x`` and ``z1-on-x`` use the covariates only;
    ``d-on-z1x`` uses ``(z1, x)`` with ``z1`` as the first column.
    """
    out = np.empty(ds.n)
    for test, model, X in _fold_models(ds, plan, spec, target):
        out[test] = predict(model, X[test])
    return out


def pscore_with_counterfactuals(ds, plan, spec, counterfactual=True):
    """Cross-fitted ``p(z1, x)`` plus ``p(0, x)`` and ``p(1, x)`` from the same fits."""
    if counterfactual and not is_binary(ds.z1):
        raise UnsupportedInstrumentError("counterfactual propensity scores need a binary z1")
    p = np.empty(ds.n)
    p0 = np.empty(ds.n) if counterfactual else None
    p1 = np.empty(ds.n) if counterfactual else None
    for test, model, X in _fold_models(ds, plan, spec, "d-on-z1x"):
        Xt = np.array(X[test])
        p[test] = predict(model, Xt)
        if counterfactual:
            Xt[:, 0] = 0.0
            p0[test] = predict(model, Xt)
            Xt[:, 0] = 1.0
            p1[test] = predict(model, Xt)
    return p, p0, p1


def counterfactual_pscores(ds: IvDataset, plan: FoldPlan, spec: RegressorSpec):
    """Out-of-fold ``(p(0, X_i), p(1, X_i))``.

    One regressor of ``d`` on ``(z1, x)`` is fitted per fold and evaluated with
    the instrument column overwritten by 0 and by 1.
    """
    _, p0, p1 = pscore_with_counterfactuals(ds, plan, spec, counterfactual=True)
    return p0, p1


def double_cross_fit_splits(plan: FoldPlan, spec: RegressorSpec):
    """Per-fold disjoint halves ``(A, B)`` of each fold's training complement."""
    splits = []
    for ell in range(plan.L):
        comp = plan.complement(ell)
        rng = np.random.default_rng(derive_seed(spec.seed, _DC_KEY, ell))
        shuffled = rng.permutation(comp)
        half = (shuffled.size + 1) // 2
        a, b = np.sort(shuffled[:half]), np.sort(shuffled[half:])
        if a.size == 0 or b.size == 0:
            raise CrossFitError(f"fold {ell}: complement of size {comp.size} is too small to split")
        splits.append((a, b))
    return splits


def double_cross_fit_m(ds: IvDataset, plan: FoldPlan, spec: RegressorSpec) -> np.ndarray:
    """Double cross-fitted ``E[p(Z1, X) | X]``.

    For fold ``l`` the complement is split into halves ``A`` and ``B``; ``p`` is
    learned on ``A``, its predictions on ``B`` become pseudo-targets, and a
    regression of those on ``x`` over ``B`` is evaluated on fold ``l``.
    """
    _check(ds, plan)
    zx = ds.features(with_instrument=True)
    out = np.empty(ds.n)
    for ell, (a, b) in enumerate(double_cross_fit_splits(plan, spec)):
        test = plan.fold(ell)
        p_model = fit(spec.with_seed(derive_seed(spec.seed, _DC_KEY, ell, 0)), zx[a], ds.d[a],
                      _weights(ds, a), target="d-on-z1x")
        pseudo = predict(p_model, zx[b])
        m_model = fit(spec.with_seed(derive_seed(spec.seed, _DC_KEY, ell, 1)), ds.x[b], pseudo,
                      _weights(ds, b), target="d-on-x")
        out[test] = predict(m_model, ds.x[test])
    return out
