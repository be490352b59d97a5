import dataclasses

import numpy as np
import pytest

from survivor_dtr.errors import ZeroOmega
from survivor_dtr.estimators import v_q_plugin
from survivor_dtr.nuisance import ARMS2, ConstantModel, fit_suite
from survivor_dtr.sensitivity import (SensitivityParams, omega_from_m, omega_weights, sensitivity_grid,
                                      v_sensitivity)
from survivor_dtr.simulation import SimConfig, default_eval_policy, scenario, simulate

POLICY = default_eval_policy()


def test_hand_omega11():
    _, _, w11 = omega_from_m(0.5, 0.6, 0.7, 0.8, SensitivityParams(1.2, 0.0))
    assert w11 == pytest.approx(0.925, abs=1e-14)


def test_unit_rho_gives_unit_weights():
    rng = np.random.default_rng(0)
    m = rng.uniform(0.2, 0.9, size=(4, 100))
    w01, w10, w11 = omega_from_m(*m, SensitivityParams(1.0, "null"))
    np.testing.assert_allclose(w01, 1.0, atol=1e-14)
    np.testing.assert_allclose(w10, 1.0, atol=1e-14)
    np.testing.assert_allclose(w11, 1.0, atol=1e-14)


def test_per_stratum_ratios():
    p = SensitivityParams({"01:0101": 2.0}, 0.0)
    assert p.ratio((0, 1), "0101") == 2.0 and p.ratio((1, 1), "0101") == 1.0
    with pytest.raises(ValueError):
        SensitivityParams(-1.0)
    with pytest.raises(ValueError):
        SensitivityParams(1.0, "other")


def test_zero_omega():
    with pytest.raises(ZeroOmega):
        omega_from_m(0.5, 0.5, 0.5, 0.5, SensitivityParams(1.0, 0.5))


@pytest.fixture(scope="module")
def fitted():
    cfg = SimConfig.from_preset("dgp1", n=2000)
    d = simulate(cfg, 4)
    spec = scenario("M1", cfg)
    return d, spec, fit_suite(d, spec, POLICY, all_m_p2=True)


def test_null_point_equals_plugin(fitted):
    d, spec, suite = fitted
    a = v_q_plugin(d, POLICY, suite, B=0).value
    b = v_sensitivity(d, POLICY, suite, SensitivityParams(1.0, "null"), spec, B=0).value
    assert abs(a - b) <= 1e-10


def test_halved_omega_doubles_value(fitted):
    d, spec, suite = fitted
    equal = dataclasses.replace(suite, m_p2={k: ConstantModel(0.6) for k in ARMS2})
    # equal arms: omega = 1 - rho_0001 * lam / m11 for (1, 1); choose lam so that omega11 = 0.5
    params = SensitivityParams(1.0, 0.3)
    w01, w10, w11 = omega_weights(np.array([0.1]), equal, params)
    assert w01[0] == pytest.approx(1.0) and w11[0] == pytest.approx(0.5)
    always = type(POLICY).two_stage([1.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    refit = fit_suite(d, spec, always, all_m_p2=True)
    refit = dataclasses.replace(refit, m_p2={k: ConstantModel(0.6) for k in ARMS2})
    base = v_sensitivity(d, always, refit, SensitivityParams(1.0, 0.0), spec, B=0).value
    halved = v_sensitivity(d, always, refit, params, spec, B=0).value
    assert halved == pytest.approx(2 * base, rel=1e-10)


def test_grid_long_format(fitted, tmp_path):
    d, spec, suite = fitted
    grid = sensitivity_grid(d, POLICY, suite, (0.8, 1.0, 1.25), (-0.2, 0.0), spec=spec)
    assert len(grid.rows) == 6 and grid.max_relative_deviation > 0
    grid.to_csv(tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "rho,lambda,value,se,relative_deviation" and len(lines) == 7


def test_bootstrap_se(fitted):
    d, spec, suite = fitted
    rep = v_sensitivity(d, POLICY, suite, SensitivityParams(1.1, -0.1), spec, B=40, seed=2)
    assert rep.se > 0 and rep.estimator == "sensitivity"
