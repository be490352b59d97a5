import numpy as np
import pytest

from survivor_dtr.errors import DimensionMismatch
from survivor_dtr.policy import (DEConfig, LinearPolicy, ValueObjective, constant_policy, differential_evolution,
                                 learn, pcd_as, policy_agreement, policy_norms_ok, project_blocks)
from survivor_dtr.estimators import v_mr
from survivor_dtr.nuisance import fit_policy_outcome, fit_suite
from survivor_dtr.simulation import SimConfig, default_eval_policy, scenario, simulate


def test_boundary_is_strict():
    pol = LinearPolicy.two_stage([0.0, 1.0], [1.0, 0.0, 0.0, 0.0])
    assert pol.decide(1, [0.0]) == 0


def test_positive_score_treats():
    pol = LinearPolicy.two_stage([0.5, -1.0], [1.0, 0.0, 0.0, 0.0])
    assert pol.decide(1, {"x1": 0.2}) == 1


def test_scale_invariance():
    rng = np.random.default_rng(0)
    a = LinearPolicy.two_stage([0.3, -0.4], [0.1, 0.2, -0.3, 0.4])
    b = LinearPolicy.two_stage([2.1, -2.8], [0.7, 1.4, -2.1, 2.8])
    cov = {"x1": rng.normal(size=500), "a1": rng.integers(0, 2, 500).astype(float), "x2": rng.normal(size=500)}
    for k in (1, 2):
        assert np.array_equal(a.decide_arrays(k, cov), b.decide_arrays(k, cov))
    np.testing.assert_allclose(np.r_[a.beta1, a.beta2], np.r_[b.beta1, b.beta2], atol=1e-15)
    assert policy_norms_ok(a)


def test_dimension_checks():
    pol = LinearPolicy.two_stage([0.3, -0.4], [0.1, 0.2, -0.3, 0.4])
    with pytest.raises(DimensionMismatch):
        pol.decide(2, [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        pol.decide_arrays(2, {"x1": np.zeros(2), "a1": np.zeros(2)})


def test_json_round_trip(tmp_path):
    pol = default_eval_policy()
    pol.to_json(tmp_path / "p.json")
    assert LinearPolicy.from_json(tmp_path / "p.json") == pol
    assert LinearPolicy.from_dict(pol.to_dict()) == pol


def test_constant_policy():
    pol = constant_policy(default_eval_policy(), 1)
    cov = {"x1": np.linspace(-1, 1, 9), "a1": np.zeros(9), "x2": np.linspace(-3, 3, 9)}
    assert pol.decide_arrays(1, cov).all() and pol.decide_arrays(2, cov).all()


def test_projection_on_spheres():
    X = project_blocks(np.random.default_rng(1).normal(size=(10, 6)), [2, 4])
    np.testing.assert_allclose(np.linalg.norm(X[:, :2], axis=1), 1.0)
    np.testing.assert_allclose(np.linalg.norm(X[:, 2:], axis=1), 1.0)


def test_de_finds_known_direction():
    target = np.array([0.6, 0.8])

    def objective(P):
        return P @ target

    res = differential_evolution(objective, [2], DEConfig(max_gen=100, seed=3))
    np.testing.assert_allclose(res.x, target, atol=1e-3)
    assert res.value >= res.initial_best and res.trace == sorted(res.trace)


def test_de_seeded():
    f = lambda P: -np.sum((P - 0.5) ** 2, axis=1)  # noqa: E731
    a = differential_evolution(f, [3], DEConfig(max_gen=20, seed=5))
    b = differential_evolution(f, [3], DEConfig(max_gen=20, seed=5))
    assert np.array_equal(a.x, b.x) and a.trace == b.trace


def test_de_config_validation():
    with pytest.raises(ValueError):
        DEConfig(CR=1.5).validate()


@pytest.fixture(scope="module")
def data():
    cfg = SimConfig.from_preset("dgp1", n=2000)
    return cfg, simulate(cfg, 21)


def test_cached_objective_matches_estimator(data):
    cfg, d = data
    spec = scenario("M1", cfg)
    suite = fit_suite(d, spec)
    template = default_eval_policy()
    obj = ValueObjective(d, suite, template, spec)
    rng = np.random.default_rng(2)
    thetas = project_blocks(rng.normal(size=(5, 6)), [2, 4])
    fast = obj(thetas)
    for theta, v in zip(thetas, fast):
        pol = template.with_vector(theta)
        slow = v_mr(d, pol, fit_policy_outcome(suite, d, pol, spec)).value
        assert v == pytest.approx(slow, rel=1e-9, abs=1e-9)


def test_learn_beats_start_and_reports(data):
    cfg, d = data
    res = learn(d, scenario("M1", cfg), "mr", DEConfig(max_gen=40, seed=1))
    assert res.value_report.value >= res.initial_best - 1e-9
    assert policy_norms_ok(res.policy)
    assert res.evaluations > 0


def test_pcd_as_identity_and_flip(data):
    cfg, _ = data
    star = default_eval_policy()
    assert pcd_as(star, star, cfg, m=20_000) == 1.0
    flipped = LinearPolicy(((-star.betas[0][0], -star.betas[0][1]), star.betas[1]), star.features)
    assert pcd_as(flipped, star, cfg, m=20_000) < 1.0


def test_agreement_grid():
    star = default_eval_policy()
    grid2 = np.column_stack([np.linspace(-0.3, 0.7, 20), np.zeros(20), np.linspace(-3, 3, 20)])
    assert policy_agreement(star, star, np.linspace(-0.3, 0.7, 20), grid2) == 1.0
