import dataclasses
import warnings

import numpy as np
import pytest
from scipy.special import expit

from survivor_dtr.errors import ArmNotFitted, EmptyStratum
from survivor_dtr.nuisance import (ARMS1, ARMS2, ConstantModel, FunctionModel, NuisanceSuite, ScenarioSpec,
                                   SeparationWarning, evaluate, fit_logistic, fit_mean, fit_policy_outcome,
                                   fit_suite)
from survivor_dtr.simulation import SimConfig, TrueModels, default_eval_policy, scenario, simulate
from survivor_dtr.trajectory import Dataset


def _const_suite(value=0.5, **over):
    one = ConstantModel(value)
    kw = dict(e1=one, c1={a: one for a in ARMS1}, p1={a: one for a in ARMS1}, e2={a: one for a in ARMS1},
              c2={k: one for k in ARMS2}, p2={k: one for k in ARMS2}, mu2={k: one for k in ARMS2},
              m_p2={k: one for k in ARMS2})
    kw.update(over)
    return NuisanceSuite(**kw)


def test_logistic_all_ones_separates_and_trims():
    X = np.ones((50, 1))
    with pytest.warns(SeparationWarning):
        m = fit_logistic(X, np.ones(50))
    assert m.separated
    fm = FunctionModel(lambda cov: m.predict_features(np.ones((len(cov["x1"]), 1))))
    suite = _const_suite(e1=fm)
    assert evaluate(suite, "e1", 1, {"x1": 0.0}) == pytest.approx(0.99)


def test_logistic_recovers_coefficients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=1_000_000)
    y = (rng.random(x.size) < expit(0.3 + 0.2 * x)).astype(float)
    m = fit_logistic(np.column_stack([np.ones_like(x), x]), y)
    assert m.converged
    assert abs(m.coef[0] - 0.3) < 0.01 and abs(m.coef[1] - 0.2) < 0.01


def test_logistic_symmetric_pair():
    m = fit_logistic(np.ones((2, 1)), np.array([0.0, 1.0]))
    assert m.coef[0] == pytest.approx(0.0, abs=1e-12)


def test_logistic_weights_match_replication():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(200), rng.normal(size=200)])
    y = (rng.random(200) < 0.4).astype(float)
    w = rng.integers(1, 4, 200).astype(float)
    rep = np.repeat(np.arange(200), w.astype(int))
    a = fit_logistic(X, y, weights=w)
    b = fit_logistic(X[rep], y[rep])
    np.testing.assert_allclose(a.coef, b.coef, atol=1e-8)


def test_mean_constant_and_exact_line():
    x = np.linspace(0, 1, 20)
    X = np.column_stack([np.ones_like(x), x])
    np.testing.assert_allclose(fit_mean(X, np.full(20, 3.5)).predict_features(X), 3.5)
    np.testing.assert_allclose(fit_mean(X, 2 * x - 1).coef, [-1, 2], atol=1e-10)


def test_mean_clip():
    suite = _const_suite(mu2={k: ConstantModel(80.0) for k in ARMS2})
    suite = dataclasses.replace(suite, clip=50.0)
    assert evaluate(suite, "mu2", (1, 1), {"x1": 0.0, "x2": 0.0, "a1": 1.0}) == 50.0


def test_probability_trim():
    suite = _const_suite(e1=FunctionModel(lambda cov: np.full(len(cov["x1"]), 0.999999)))
    assert evaluate(suite, "e1", 1, {"x1": 0.0}) == pytest.approx(0.99)


def test_structural_constants_not_trimmed():
    suite = _const_suite(1.0)
    assert evaluate(suite, "p1", 0, {"x1": 0.0}) == 1.0


def test_missing_arm():
    suite = _const_suite(m_p2={(0, 0): ConstantModel(1.0)})
    with pytest.raises(ArmNotFitted):
        evaluate(suite, "m_p2", (1, 1), {"x1": 0.0})


@pytest.fixture(scope="module")
def big():
    cfg = SimConfig.from_preset("dgp1", n=100_000)
    return cfg, simulate(cfg, 3)


def test_m_p2_regression_matches_truth(big):
    cfg, d = big
    suite = fit_suite(d, scenario("M1", cfg))
    truth = TrueModels(cfg).m_p2(0, 0, np.array([0.2]))[0]
    assert abs(evaluate(suite, "m_p2", (0, 0), {"x1": 0.2}) - truth) < 0.02


def test_e1_at_zero(big):
    cfg, d = big
    suite = fit_suite(d, scenario("M1", cfg))
    assert evaluate(suite, "e1", 1, {"x1": 0.0}) == pytest.approx(expit(0.3), abs=0.01)


def test_p1_at_zero():
    cfg = SimConfig.from_preset("dgp1", n=5000)
    suite = fit_suite(simulate(cfg, 4), scenario("M1", cfg))
    assert evaluate(suite, "p1", 0, {"x1": 0.0}) == pytest.approx(0.5, abs=0.03)


def test_all_treated_is_empty_stratum():
    cfg = SimConfig.from_preset("dgp1", n=400)
    d = simulate(cfg, 5)
    treated = np.flatnonzero(d.a1 == 1)
    with pytest.raises(EmptyStratum) as exc:
        fit_suite(d.subset(treated), scenario("M1", cfg))
    assert "m_p2" in exc.value.name or "A1=0" in exc.value.name or "^0" in exc.value.name


def test_m6_flags():
    spec = ScenarioSpec.preset("M6")
    for name in ("e1", "c1", "e2", "c2", "p1"):
        assert spec.feature_map(name).terms == ("1",)
    for name in ("p2", "mu2", "m_p2", "m_mu2"):
        assert spec.flag(name) == "correct"


def test_misspecified_mean_has_no_intercept():
    fm = ScenarioSpec.preset("M5").feature_map("mu2")
    assert fm.terms == ("exp(x1)",) and not fm.has_intercept


def test_policy_outcome_uses_fitted_stage_two():
    cfg = SimConfig.from_preset("dgp1", n=2000)
    d = simulate(cfg, 6)
    pol = default_eval_policy()
    spec = scenario("M1", cfg)
    base = fit_suite(d, spec)
    shifted = dataclasses.replace(base, mu2={k: ConstantModel(7.0) for k in ARMS2})
    suite = fit_policy_outcome(shifted, d, pol, spec)
    for a in ARMS1:
        np.testing.assert_allclose(suite.mean("m_mu2", (a,), {"x1": np.linspace(-0.3, 0.7, 5)}), 7.0, atol=1e-8)


def test_death_as_censoring_suite():
    cfg = SimConfig.from_preset("dgp1", n=2000)
    d = simulate(cfg, 7)
    suite = fit_suite(d, scenario("M1", cfg), death_as_censoring=True)
    cov = {"x1": np.array([0.1]), "x2": np.array([0.0]), "a1": np.array([1.0])}
    assert suite.prob("p2", (1, 1), cov)[0] == 1.0
    assert suite.prob("c2", (1, 1), cov)[0] < 0.9


def test_rank_deficient_design_warns():
    X = np.column_stack([np.ones(10), np.ones(10)])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        m = fit_mean(X, np.arange(10.0))
    assert m.dropped == (1,) and caught


def test_multivariate_covariates_fit():
    rng = np.random.default_rng(9)
    from conftest import fuzz_dataset

    d = fuzz_dataset(rng, 400, p1=2, p2=2)
    assert isinstance(d, Dataset)
    suite = fit_suite(d)
    assert suite.m_p2[(0, 0)] is not None
