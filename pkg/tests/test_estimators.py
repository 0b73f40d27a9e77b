import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmliv.core import IvDataset, NuisanceFit, make_fold_plan
from cmliv.dgp import draw_sample, exact_estimands, oracle_nuisances, preset
from cmliv.errors import (
    InvalidConfigurationError,
    UnsupportedInstrumentError,
    WeakIdentificationError,
)
from cmliv.estimators import (
    VarianceOptions,
    build_instrument,
    estimate,
    estimate_all,
    fit_nuisances,
    moment_estimate,
    ratio_estimate,
    residualize,
    variance_estimate,
)
from cmliv.learners import RegressorSpec


def _oracle_fit(cfg, ds):
    o = oracle_nuisances(cfg)
    x1 = ds.x[:, 0]
    return NuisanceFit(eta1=o.eta_y(x1), eta2=o.eta_d(x1), pscore=o.pscore(ds.z1, x1),
                       eta_z=o.eta_z(x1), pscore_cf0=o.p0(x1), pscore_cf1=o.p1(x1),
                       m_dc=o.eta_d(x1), d_binary=True)


def _toy(n=50, seed=0):
    rng = np.random.default_rng(seed)
    z1 = rng.integers(0, 2, n).astype(float)
    d = (rng.random(n) < 0.2 + 0.5 * z1).astype(float)
    return IvDataset(y=rng.normal(size=n) + d, d=d, z1=z1, x=rng.normal(size=(n, 1)))


def test_residualize_examples():
    ds = IvDataset(y=[1.0, 2.0], d=[0.0, 1.0], z1=[0.0, 1.0], x=[[0.0], [1.0]])
    yt, dt = residualize(ds, NuisanceFit(eta1=np.zeros(2), eta2=np.zeros(2)))
    assert yt.tolist() == [1.0, 2.0] and dt.tolist() == [0.0, 1.0]
    yt, _ = residualize(ds, NuisanceFit(eta1=np.array([0.5, 0.5]), eta2=np.zeros(2)))
    assert yt.tolist() == [0.5, 1.5]
    yt, _ = residualize(ds, NuisanceFit(eta1=ds.y, eta2=np.zeros(2)))
    assert np.all(yt == 0)
    with pytest.raises(InvalidConfigurationError):
        residualize(ds, NuisanceFit(eta1=np.zeros(2)))


def test_noiseless_relation_returns_two():
    ds = _toy()
    ds = ds.replace(y=2 * ds.d)
    nf = NuisanceFit(eta1=np.zeros(ds.n), eta2=np.zeros(ds.n), pscore=ds.z1 * 0.5 + 0.25 + ds.d * 0.1)
    rep = estimate(ds, nf, "cml")
    assert rep.theta == 2.0
    assert rep.variance == 0.0 and rep.std_error == 0.0


def test_two_observation_variance():
    rep = moment_estimate(np.array([1.0, -1.0]), np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    assert rep.theta == 0.0
    assert rep.variance == pytest.approx(1.0, abs=1e-15)
    assert rep.std_error == pytest.approx(math.sqrt(0.5))


def test_singleton_clusters_equal_iid():
    rng = np.random.default_rng(1)
    a, b, k = rng.normal(size=(3, 200))
    iid = moment_estimate(a, b + 2 * k, k)
    clu = moment_estimate(a, b + 2 * k, k, clusters=np.arange(200), vopts=VarianceOptions("cluster"))
    assert clu.variance == pytest.approx(iid.variance, rel=1e-12)
    assert clu.n_clusters == 200


def test_cluster_robust_sums_within_clusters():
    a = np.array([1.0, 1.0, -1.0, -1.0])
    b = np.ones(4)
    k = np.ones(4)
    rep = moment_estimate(a, b, k, clusters=np.array([0, 0, 1, 1]), vopts=VarianceOptions("cluster"))
    # scores (1, 1, -1, -1); cluster sums (2, -2); meat = 8 / 4
    assert rep.variance == pytest.approx(2.0)
    with pytest.raises(InvalidConfigurationError):
        moment_estimate(a, b, k, vopts=VarianceOptions("cluster"))


def test_weights_normalised_and_equal_weights_are_neutral():
    ds = _toy(seed=2)
    nf = NuisanceFit(eta1=np.zeros(ds.n), eta2=np.full(ds.n, ds.d.mean()),
                     pscore=np.clip(0.3 + 0.4 * ds.z1, 0, 1))
    plain = estimate(ds, nf, "cml")
    weighted = estimate(ds.replace(weight=np.full(ds.n, 7.0)), nf, "cml")
    assert weighted.theta == pytest.approx(plain.theta, rel=1e-12)
    assert weighted.variance == pytest.approx(plain.variance, rel=1e-12)


def test_weighted_estimate_matches_row_duplication():
    ds = _toy(n=40, seed=3)
    w = np.where(np.arange(40) < 20, 2.0, 1.0)
    nf = NuisanceFit(eta1=np.zeros(40), eta2=np.full(40, 0.5), pscore=0.3 + 0.4 * ds.z1)
    rep_w = estimate(ds.replace(weight=w), nf, "cml")
    rows = np.concatenate([np.arange(40), np.arange(20)])
    nf_dup = NuisanceFit(eta1=np.zeros(60), eta2=np.full(60, 0.5), pscore=nf.pscore[rows])
    rep_dup = estimate(ds.take(rows), nf_dup, "cml")
    assert rep_w.theta == pytest.approx(rep_dup.theta, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3))
def test_instrument_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    a, b, k = rng.normal(size=(3, 60))
    b = b + k
    r1 = moment_estimate(a, b, k)
    r2 = moment_estimate(a, b, c * k)
    assert r2.theta == pytest.approx(r1.theta, rel=1e-12, abs=1e-12)
    assert r2.variance == pytest.approx(r1.variance, rel=1e-12)
    assert r2.std_error == pytest.approx(r1.std_error, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ratio_equals_iv_regression(seed):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=80)
    d = 0.7 * k + rng.normal(size=80)
    y = 1.5 * d + rng.normal(size=80)
    theta = moment_estimate(y, d, k).theta
    # two-stage least squares without intercept
    pi = np.linalg.lstsq(k[:, None], d, rcond=None)[0]
    dhat = k * pi[0]
    beta = np.linalg.lstsq(dhat[:, None], y, rcond=None)[0][0]
    assert theta == pytest.approx(beta, rel=1e-12, abs=1e-12)


def test_weak_identification_raised_with_denominator():
    k = np.array([1.0, -1.0, 1.0, -1.0])
    b = np.array([1.0, 1.0, 1.0, 1.0])
    with pytest.raises(WeakIdentificationError) as info:
        moment_estimate(np.ones(4), b, k, estimator_id="dml")
    assert info.value.denominator == 0.0
    assert "dml" in str(info.value)


def test_literal_denominator_flag_inflates_variance():
    cfg = preset("dgp3")
    ds = draw_sample(cfg, 2000, 1)
    nf = _oracle_fit(cfg, ds)
    jac = estimate(ds, nf, "cml")
    lit = estimate(ds, nf, "cml", VarianceOptions(literal_denominator=True))
    assert lit.theta == jac.theta
    assert lit.variance > 100 * jac.variance


def test_variance_estimate_at_point_estimate_matches_report():
    cfg = preset("dgp1")
    ds = draw_sample(cfg, 1000, 2)
    nf = _oracle_fit(cfg, ds)
    for e in ("cml", "dml", "cs", "ai"):
        rep = estimate(ds, nf, e)
        var, se = variance_estimate(ds, nf, e, rep.theta)
        assert var == pytest.approx(rep.variance, rel=1e-12)
        assert se == pytest.approx(rep.std_error, rel=1e-12)
        assert rep.ci_lower == pytest.approx(rep.theta - 1.959964 * rep.std_error)


def test_instrument_definitions():
    cfg = preset("dgp1")
    ds = draw_sample(cfg, 300, 3)
    nf = _oracle_fit(cfg, ds)
    np.testing.assert_array_equal(build_instrument(ds, nf, "cml"), nf.pscore - nf.eta2)
    np.testing.assert_array_equal(build_instrument(ds, nf, "ai"), nf.pscore - nf.eta2)
    np.testing.assert_array_equal(build_instrument(ds, nf, "cml-dc"), nf.pscore - nf.m_dc)
    np.testing.assert_array_equal(build_instrument(ds, nf, "dml"), ds.z1 - nf.eta_z)
    cs = build_instrument(ds, nf, "cs")
    np.testing.assert_allclose(cs, (nf.pscore_cf1 - nf.pscore_cf0) * (ds.z1 - ds.z1.mean()))


def test_cs_instrument_constant_first_stage():
    ds = _toy(seed=4)
    nf = NuisanceFit(eta1=np.zeros(ds.n), eta2=np.zeros(ds.n), pscore_cf0=np.full(ds.n, 0.2),
                     pscore_cf1=np.full(ds.n, 0.6))
    np.testing.assert_allclose(build_instrument(ds, nf, "cs"), 0.4 * (ds.z1 - ds.z1.mean()))


def test_ai_uses_raw_outcome_and_treatment():
    ds = _toy(seed=5)
    k = 0.3 + 0.4 * ds.z1 - 0.5
    nf = NuisanceFit(eta1=np.full(ds.n, 9.0), eta2=np.full(ds.n, 0.5), pscore=0.3 + 0.4 * ds.z1)
    assert estimate(ds, nf, "ai").theta == pytest.approx(np.sum(ds.y * k) / np.sum(ds.d * k))
    assert ratio_estimate(ds, nf, "ai") == pytest.approx(estimate(ds, nf, "ai").theta)


def test_missing_nuisance_is_configuration_error():
    ds = _toy()
    with pytest.raises(InvalidConfigurationError):
        estimate(ds, NuisanceFit(eta1=np.zeros(ds.n), eta2=np.zeros(ds.n)), "dml")
    with pytest.raises(InvalidConfigurationError):
        estimate(ds, NuisanceFit(), "unknown")


def test_estimate_all_single_and_shared():
    cfg = preset("dgp3")
    ds = draw_sample(cfg, 400, 1)
    plan = make_fold_plan(400, 4, 0)
    spec = RegressorSpec(kind="rf", n_trees=20)
    out = estimate_all(ds, plan, spec, {"cml"})
    assert list(out) == ["cml"] and out["cml"].estimator_id == "cml"
    both = estimate_all(ds, plan, spec, ["cml", "ai"])
    nf = fit_nuisances(ds, plan, spec, ["cml", "ai"])
    np.testing.assert_array_equal(build_instrument(ds, nf, "cml"), build_instrument(ds, nf, "ai"))
    assert both["cml"].theta == estimate(ds, nf, "cml").theta


def test_fit_nuisances_fits_only_what_is_needed():
    ds = draw_sample(preset("dgp1"), 200, 1)
    plan = make_fold_plan(200, 4, 0)
    nf = fit_nuisances(ds, plan, RegressorSpec(kind="ridge"), ["dml"])
    assert nf.eta_z is not None and nf.pscore is None and nf.m_dc is None
    nf = fit_nuisances(ds, plan, RegressorSpec(kind="ridge"), ["ai"])
    assert nf.eta1 is None and nf.pscore is not None


def test_estimate_all_cs_needs_binary_instrument():
    ds = draw_sample(preset("dgp3"), 100, 1)
    ds = ds.replace(z1=np.where(ds.z1 == 1, 0.5, 0.0))
    with pytest.raises(UnsupportedInstrumentError):
        estimate_all(ds, make_fold_plan(100, 4, 0), RegressorSpec(kind="ridge"), {"cs"})


def test_dgp3_oracle_cml_centres_on_exact_estimand():
    cfg = preset("dgp3")
    ds = draw_sample(cfg, 50_000, 11)
    rep = estimate(ds, _oracle_fit(cfg, ds), "cml")
    assert abs(rep.theta - exact_estimands(cfg).theta0) < 3 * rep.std_error


@pytest.mark.xfail(strict=True, reason="the zero target assumes effects independent of "
                   "compliance type; under this design the estimand is about 0.133")
def test_dgp3_oracle_cml_centres_on_zero():
    cfg = preset("dgp3")
    ds = draw_sample(cfg, 50_000, 11)
    rep = estimate(ds, _oracle_fit(cfg, ds), "cml")
    assert abs(rep.theta) < 3 * rep.std_error


def test_double_robustness_with_wrong_residualisation():
    cfg = preset("dgp1")
    target = exact_estimands(cfg).theta0
    ds = draw_sample(cfg, 100_000, 12)
    nf = _oracle_fit(cfg, ds)
    # true instrument, residualisation by zero instead of E[Y|X] and E[D|X]
    rep = moment_estimate(ds.y, ds.d, build_instrument(ds, nf, "cml"))
    assert abs(rep.theta - target) < 3 * rep.std_error


def test_true_residualisation_with_dml_instrument_is_consistent():
    cfg = preset("dgp3")
    ds = draw_sample(cfg, 100_000, 13)
    rep = estimate(ds, _oracle_fit(cfg, ds), "dml")
    assert abs(rep.theta - exact_estimands(cfg).theta0) < 3 * rep.std_error


@pytest.mark.parametrize("name", ["dgp1", "dgp2", "dgp3"])
def test_population_instrument_is_orthogonal_to_covariates(name):
    cfg = preset(name)
    ds = draw_sample(cfg, 1_000_000, 14)
    kappa = oracle_nuisances(cfg).instrument(ds.z1, ds.x[:, 0])
    for f in (np.ones(ds.n), ds.x[:, 0]):
        v = kappa * f
        assert abs(v.mean()) < 4 * v.std() / math.sqrt(ds.n) + 1e-15
