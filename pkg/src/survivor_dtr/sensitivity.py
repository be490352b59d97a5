"""Sensitivity of the always-survivor value to principal ignorability.

Tilting ratios ``rho`` compare outcome means of other principal strata with the
always-survivors, and ``lambda`` offsets the split between the 0011 and 0101
strata.  The stage-2 regression is divided by ``omega_{a1 a2}(x1)`` before the
stage-1 regression, and the value is the principal-score weighted mean of the
result.  At ``rho = 1`` and ``lambda = m00 - m01`` every omega equals one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import NonpositiveDenominator, ZeroOmega
from .estimators import EstimateReport, _bootstrap_ratio, _report
from .nuisance import ARMS2, NuisanceSuite, ScenarioSpec, _rows, fit_policy_outcome

OMEGA_FLOOR = 1e-8

# ratio names per treatment arm; the "10" arm's first ratio is printed with a
# three-digit label and read here as the 0011 stratum
RHO_KEYS = {
    (0, 1): ("0101", "0111"),
    (1, 0): ("0011", "0111"),
    (1, 1): ("0101", "0011", "0001"),
}


@dataclass(frozen=True)
class SensitivityParams:
    """``rho``: one constant for every (stratum, arm) or a mapping ``{"a1a2:u": value}``;
    ``lam``: a constant or ``"null"`` for ``m00 - m01`` pointwise."""

    rho: float | Mapping[str, float] = 1.0
    lam: float | str = 0.0
    default_rho: float = 1.0

    def __post_init__(self):
        values = self.rho.values() if isinstance(self.rho, Mapping) else [self.rho]
        if any(not v > 0 for v in values):
            raise ValueError("sensitivity ratios must be positive")
        if isinstance(self.lam, str) and self.lam != "null":
            raise ValueError("lambda must be a number or 'null'")

    def ratio(self, arm, stratum):
        if isinstance(self.rho, Mapping):
            return float(self.rho.get(f"{arm[0]}{arm[1]}:{stratum}", self.default_rho))
        return float(self.rho)


def omega_from_m(m00, m01, m10, m11, params: SensitivityParams):
    """``(omega01, omega10, omega11)`` from the four eventual-survival regressions."""
    m00, m01, m10, m11 = (np.asarray(v, dtype=float) for v in (m00, m01, m10, m11))
    lam = m00 - m01 if params.lam == "null" else float(params.lam)
    r = params.ratio
    w01 = m00 / m01 + r((0, 1), "0101") * (1.0 - m10 / m01) + r((0, 1), "0111") * (m10 - m00) / m01
    w10 = m00 / m10 + r((1, 0), "0011") * (1.0 - m01 / m10) + r((1, 0), "0111") * (m01 - m00) / m10
    w11 = (m00 / m11 + r((1, 1), "0101") * (m01 - m10) / m11 + r((1, 1), "0011") * (m10 - m01) / m11
           + r((1, 1), "0001") * (1.0 - (m01 + lam) / m11))
    for name, w in (("omega01", w01), ("omega10", w10), ("omega11", w11)):
        if np.any(np.abs(w) < OMEGA_FLOOR) or not np.all(np.isfinite(w)):
            raise ZeroOmega(f"{name} vanishes or is undefined")
    return w01, w10, w11


def omega_weights(x1, suite: NuisanceSuite, params: SensitivityParams):
    """Evaluate the omega weights at covariates ``x1`` (mapping or array)."""
    if isinstance(x1, Mapping):
        cov = x1
    else:
        from .trajectory import covariate_dict

        arr = np.asarray(x1, dtype=float)
        cov = covariate_dict(arr.reshape(-1, 1) if arr.ndim <= 1 else arr)
    m = {arm: suite.mean("m_p2", arm, cov) for arm in ARMS2}
    if any(np.any(v <= 0) for v in m.values()):
        raise ZeroOmega("eventual-survival regression is not positive")
    return omega_from_m(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)], params)


def _omega_arm(suite, cov, params, a1, a2):
    if (a1, a2) == (0, 0):
        return np.ones(len(next(iter(cov.values()))))
    w01, w10, w11 = omega_weights(cov, suite, params)
    return {(0, 1): w01, (1, 0): w10, (1, 1): w11}[(a1, a2)]


def fit_nu_outcome(suite: NuisanceSuite, d, policy, params: SensitivityParams, spec: ScenarioSpec | None = None):
    """Stage-1 regression of ``mu2^{a1, pi2} / omega_{a1 pi2}(x1)`` (per first-stage arm)."""

    def target(cov, mask, a1):
        sub = _rows(cov, mask)
        sub["a1"] = np.full(int(mask.sum()), float(a1))
        d2 = policy.decide_arrays(2, sub)
        vals = np.empty(int(mask.sum()))
        for a2 in (0, 1):
            sel = d2 == a2
            if sel.any():
                part = _rows(sub, sel)
                vals[sel] = suite.mean("mu2", (a1, a2), part) / _omega_arm(suite, part, params, a1, a2)
        out = np.full(len(mask), np.nan)
        out[mask] = vals
        return out

    return fit_policy_outcome(suite, d, policy, spec, target_fn=target)


def sensitivity_terms(d, policy, suite, params, spec=None):
    fitted = fit_nu_outcome(suite, d, policy, params, spec)
    cov = d.covariates()
    q_s1 = suite.prob("p1", (0,), cov) * suite.mean("m_p2", (0, 0), cov)
    pi1 = policy.decide_arrays(1, cov)
    m_nu = fitted.by_arm("m_mu2", pi1, cov, np.ones(d.n, bool))
    return q_s1 * m_nu, q_s1


def v_sensitivity(d, policy, suite: NuisanceSuite, params: SensitivityParams, spec: ScenarioSpec | None = None,
                  B=200, seed=0) -> EstimateReport:
    """Sensitivity-adjusted plug-in value; bootstrap standard error with nuisances fixed.

    ``suite`` needs all four eventual-survival regressions
    (``fit_suite(..., all_m_p2=True)``).
    """
    num, den = sensitivity_terms(d, policy, suite, params, spec)
    if not den.mean() > 1e-8:
        raise NonpositiveDenominator(float(den.mean()))
    value = float(num.mean() / den.mean())
    se = _bootstrap_ratio(num, den, B, seed)
    lam = params.lam
    return _report("sensitivity", value, se, d.n, float(den.mean()), (),
                   rho=params.rho if not isinstance(params.rho, Mapping) else dict(params.rho), lam=lam)


@dataclass
class GridResult:
    rows: list = field(default_factory=list)
    baseline: float = float("nan")

    @property
    def max_relative_deviation(self):
        return max(abs(r["value"] - self.baseline) / abs(self.baseline) for r in self.rows)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["rho", "lambda", "value", "se", "relative_deviation"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def sensitivity_grid(d, policy, suite, rhos=(0.8, 1.0, 1.25), lambdas=(-0.2, 0.0), spec=None, B=0, seed=0,
                     baseline=None) -> GridResult:
    """Evaluate :func:`v_sensitivity` on a (rho, lambda) grid (long format)."""
    if baseline is None:
        from .estimators import v_q_plugin

        baseline = v_q_plugin(d, policy, suite, B=0).value
    out = GridResult(baseline=baseline)
    for rho in rhos:
        for lam in lambdas:
            r = v_sensitivity(d, policy, suite, SensitivityParams(rho, lam), spec, B=B, seed=seed)
            out.rows.append({"rho": rho, "lambda": lam, "value": r.value, "se": r.se,
                             "relative_deviation": abs(r.value - baseline) / abs(baseline)})
    return out
