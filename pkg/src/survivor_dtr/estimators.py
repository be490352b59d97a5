"""Always-survivor value estimators for two-stage policies.

The multiply robust estimator is the ratio of the empirical means of two
per-trajectory terms, ``phi_n`` (numerator) and ``phi_d`` (denominator), built
from the nuisance suite:

    phi_d = g2 s1 s2 / (phi1 phi2) + (1 - g1/phi1) QS1 + (g1/phi1 - g2/(phi1 phi2)) QS2
    phi_n = QY1 phi_d + [W1 (QY2 - QY1) + W1 W2 (QY3 - QY2)] QS1

with ``g1 = 1{A1=C1=0}``, ``g2 = 1{A1=A2=C1=C2=0}``, ``QS1 = p1^0 m_p2^00(x1)``,
``QS2 = s1 p2^00(x1, x2)``, ``QY1 = m_mu2^pi(x1)``, ``QY2 = mu2^pi(x1, x2)``,
``QY3 = y`` and ``Wj = 1{Aj = pij}(1 - Cj) Sj / (phij^pi pj^pi)``.  Terms whose
gate is zero are never evaluated, so absent fields are never touched.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonpositiveDenominator
from .nuisance import NuisanceSuite
from .trajectory import Dataset, Trajectory

Z95 = 1.959963984540054
DENOMINATOR_FLOOR = 1e-8
DEFAULT_BOOTSTRAP = 200


@dataclass
class EifTerms:
    """Per-trajectory pieces of the influence function (arrays of length n).

    ``q_s`` has columns (QS1, QS2) and ``q_y`` columns (QY1, QY2, QY3); entries
    that only ever meet a zero indicator are ``NaN``.
    """

    q_s: np.ndarray
    q_y: np.ndarray
    w: np.ndarray
    phi_d: np.ndarray
    phi_n: np.ndarray
    trimmed: dict = field(default_factory=dict)


@dataclass
class EstimateReport:
    estimator: str
    value: float
    se: float
    ci_low: float
    ci_high: float
    n: int
    mean_phi_d: float
    warnings: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        """Flat JSON-ready record."""
        out = asdict(self)
        out.pop("diagnostics")
        out.update({f"diag_{k}": v for k, v in self.diagnostics.items()})
        return out

    def covers(self, truth):
        return self.ci_low <= truth <= self.ci_high


def _ratio(num, den, name):
    if not den > DENOMINATOR_FLOOR:
        raise NonpositiveDenominator(den)
    return num / den


def _require_policy_fit(suite, policy):
    if suite.m_mu2 is None or suite.policy != policy:
        raise ValueError("suite has no stage-1 outcome regression for this policy; "
                         "fit it with fit_suite(..., policy=...) or fit_policy_outcome")


def eif_terms(d: Dataset, policy, suite: NuisanceSuite) -> EifTerms:
    """Vectorized ``phi_d``/``phi_n`` and their building blocks for every row."""
    _require_policy_fit(suite, policy)
    stats = {}
    n = d.n
    cov = d.covariates()
    everyone = np.ones(n, bool)
    a1 = d.a1.astype(int)
    a2 = np.nan_to_num(d.a2, nan=-1).astype(int)
    reached = d.reached2
    arms2 = np.column_stack([a1, a2])

    # denominator ---------------------------------------------------------
    g1 = (d.a1 == 0) & (d.c1 == 0)
    g2 = g1 & reached & (d.a2 == 0) & (d.c2 == 0)
    zeros = np.zeros(n, int)
    phi1_0 = suite.by_arm("phi1", zeros, cov, everyone, stats)
    q_s1 = suite.by_arm("p1", zeros, cov, everyone, stats) * suite.by_arm("m_p2", np.zeros((n, 2), int), cov, everyone)
    q_s2 = np.zeros(n)
    p2_00 = suite.by_arm("p2", np.zeros((n, 2), int), cov, reached, stats)
    q_s2[reached] = p2_00[reached]
    phi2_00 = suite.by_arm("phi2", np.zeros((n, 2), int), cov, g2, stats)
    inv1 = np.where(g1, 1.0 / phi1_0, 0.0)
    inv12 = np.zeros(n)
    inv12[g2] = 1.0 / (phi1_0[g2] * phi2_00[g2])
    survived = g2 & (d.s2 == 1)
    phi_d = np.where(survived, inv12, 0.0) + (1.0 - inv1) * q_s1 + (inv1 - inv12) * q_s2

    # numerator -----------------------------------------------------------
    pi1 = policy.decide_arrays(1, cov)
    q_y1 = suite.by_arm("m_mu2", pi1, cov, everyone)
    alive1 = (d.a1 == pi1) & (d.c1 == 0) & (d.s1 == 1)
    w1 = np.zeros(n)
    w1[alive1] = 1.0 / (
        suite.by_arm("phi1", a1, cov, alive1, stats)[alive1] * suite.by_arm("p1", a1, cov, alive1, stats)[alive1]
    )
    pi2 = np.full(n, -1)
    if reached.any():
        pi2[reached] = policy.decide_arrays(2, {k: v[reached] for k, v in cov.items()})
    arms_pi = np.column_stack([a1, pi2])
    q_y2 = suite.by_arm("mu2", arms_pi, cov, alive1)
    alive2 = alive1 & (d.a2 == pi2) & (d.c2 == 0) & (d.s2 == 1)
    w2 = np.zeros(n)
    w2[alive2] = 1.0 / (
        suite.by_arm("phi2", arms2, cov, alive2, stats)[alive2] * suite.by_arm("p2", arms2, cov, alive2, stats)[alive2]
    )
    aug = np.zeros(n)
    aug[alive1] = w1[alive1] * (q_y2[alive1] - q_y1[alive1])
    aug[alive2] += w1[alive2] * w2[alive2] * (d.y[alive2] - q_y2[alive2])
    phi_n = q_y1 * phi_d + aug * q_s1
    q_y3 = np.where(d.observed_y, d.y, np.nan)
    return EifTerms(
        q_s=np.column_stack([q_s1, q_s2]),
        q_y=np.column_stack([q_y1, q_y2, q_y3]),
        w=np.column_stack([w1, w2]),
        phi_d=phi_d,
        phi_n=phi_n,
        trimmed=stats,
    )


def _single(t: Trajectory) -> Dataset:
    return Dataset.from_rows([t], p2=len(t.x2) if t.x2 is not None else None)


def phi_d(t: Trajectory, suite: NuisanceSuite, policy=None) -> float:
    """Denominator term for one trajectory (``policy`` defaults to the suite's)."""
    return float(eif_terms(_single(t), policy or suite.policy, suite).phi_d[0])


def phi_n(t: Trajectory, policy, suite: NuisanceSuite) -> float:
    return float(eif_terms(_single(t), policy, suite).phi_n[0])


def principal_score(x1, suite: NuisanceSuite, denominator: float):
    """``p1^0(x1) m_p2^00(x1) / denominator`` (scalar or vector ``x1``)."""
    if not denominator > 0:
        raise NonpositiveDenominator(denominator)
    from .trajectory import covariate_dict

    x1 = np.asarray(x1, dtype=float)
    scalar = x1.ndim == 0
    cov = covariate_dict(x1.reshape(-1, 1) if x1.ndim <= 1 else x1)
    n = len(next(iter(cov.values())))
    score = suite.prob("p1", (0,), cov) * suite.mean("m_p2", (0, 0), cov) / denominator
    return float(score[0]) if scalar or n == 1 and x1.ndim == 0 else score


def principal_score_denominator(d: Dataset, suite: NuisanceSuite) -> float:
    cov = d.covariates()
    return float(np.mean(suite.prob("p1", (0,), cov) * suite.mean("m_p2", (0, 0), cov)))


def eif(t: Trajectory, policy, suite: NuisanceSuite, v_hat: float, d_hat: float) -> float:
    terms = eif_terms(_single(t), policy, suite)
    return float(eif_values(terms.phi_n, terms.phi_d, v_hat, d_hat)[0])


def eif_values(phi_n, phi_d, v_hat, d_hat):
    """``(phi_n - v_hat phi_d) / d_hat``."""
    if not d_hat > 0:
        raise NonpositiveDenominator(d_hat)
    return (np.asarray(phi_n) - v_hat * np.asarray(phi_d)) / d_hat


def eif_variance(psi):
    """Standard error ``sqrt(mean(psi^2) / n)`` and the bound estimate ``mean(psi^2)``.

    Returns
    -------
    se : float
    upsilon : float
    """
    psi = np.asarray(psi, dtype=float)
    if psi.size < 2:
        raise ValueError("need at least two influence values")
    upsilon = float(np.mean(psi**2))
    return math.sqrt(upsilon / psi.size), upsilon


def _report(name, value, se, n, mean_phi_d, warnings=(), **diagnostics):
    return EstimateReport(
        estimator=name,
        value=float(value),
        se=float(se),
        ci_low=float(value - Z95 * se),
        ci_high=float(value + Z95 * se),
        n=int(n),
        mean_phi_d=float(mean_phi_d),
        warnings=list(warnings),
        diagnostics=diagnostics,
    )


def _fsum_mean(x):
    return math.fsum(np.asarray(x, dtype=float).tolist()) / len(x)


def mr_from_terms(phi_n, phi_d, name="mr", warnings=(), **diagnostics):
    mean_d = _fsum_mean(phi_d)
    if not mean_d > DENOMINATOR_FLOOR:
        raise NonpositiveDenominator(mean_d)
    value = _fsum_mean(phi_n) / mean_d
    psi = eif_values(phi_n, phi_d, value, mean_d)
    se, upsilon = eif_variance(psi)
    return _report(name, value, se, len(phi_d), mean_d, warnings, upsilon=upsilon,
                   mean_psi=float(np.mean(psi)), **diagnostics), psi


def v_mr(d: Dataset, policy, suite: NuisanceSuite) -> EstimateReport:
    """Multiply robust estimate ``mean(phi_n) / mean(phi_d)`` with an EIF-based 95% interval."""
    terms = eif_terms(d, policy, suite)
    report, _ = mr_from_terms(terms.phi_n, terms.phi_d, "mr", suite.notes,
                              **{f"trimmed_{k}": v for k, v in terms.trimmed.items()})
    return report


def _bootstrap_ratio(num, den, B, seed):
    if B <= 1:
        return float("nan")
    rng = np.random.default_rng(seed)
    n = len(num)
    out = np.empty(B)
    for b in range(B):
        idx = rng.integers(0, n, n)
        out[b] = num[idx].mean() / den[idx].mean()
    return float(np.std(out, ddof=1))


def plugin_terms(d: Dataset, policy, suite: NuisanceSuite):
    """Per-row numerator and denominator of the principal Q-learning estimator."""
    _require_policy_fit(suite, policy)
    cov = d.covariates()
    q_s1 = suite.prob("p1", (0,), cov) * suite.mean("m_p2", (0, 0), cov)
    pi1 = policy.decide_arrays(1, cov)
    q_y1 = suite.by_arm("m_mu2", pi1, cov, np.ones(d.n, bool))
    return q_s1 * q_y1, q_s1


def v_q_plugin(d: Dataset, policy, suite: NuisanceSuite, B=DEFAULT_BOOTSTRAP, seed=0) -> EstimateReport:
    """Principal Q-learning: mean of principal score times ``m_mu2^pi``; bootstrap SE.

    The bootstrap resamples whole trajectories with the fitted nuisances held
    fixed; ``B=0`` skips it (``se`` is then ``NaN``).
    """
    num, den = plugin_terms(d, policy, suite)
    value = _ratio(num.mean(), den.mean(), "plugin")
    se = _bootstrap_ratio(num, den, B, seed)
    return _report("q_plugin", value, se, d.n, den.mean(), suite.notes)


def ipw_terms(d: Dataset, policy, suite: NuisanceSuite):
    terms = eif_terms(d, policy, suite)
    q_s1 = terms.q_s[:, 0]
    ww = terms.w[:, 0] * terms.w[:, 1]
    num = np.zeros(d.n)
    hit = ww > 0
    num[hit] = q_s1[hit] * ww[hit] * d.y[hit]
    return num, q_s1


def v_ipw(d: Dataset, policy, suite: NuisanceSuite, B=DEFAULT_BOOTSTRAP, seed=0) -> EstimateReport:
    """Self-normalized inverse-weighting estimate with principal-score weights; bootstrap SE."""
    num, den = ipw_terms(d, policy, suite)
    value = _ratio(num.mean(), den.mean(), "ipw")
    se = _bootstrap_ratio(num, den, B, seed)
    return _report("ipw", value, se, d.n, den.mean(), suite.notes)


def aipw_terms(d: Dataset, policy, suite: NuisanceSuite):
    """Per-row AIPW integrand treating death as censoring.

    ``suite`` must come from ``fit_suite(..., death_as_censoring=True)``: its
    ``c1``/``c2`` are probabilities of being neither censored nor dead and its
    ``p`` models are identically one.
    """
    _require_policy_fit(suite, policy)
    n = d.n
    cov = d.covariates()
    a1 = d.a1.astype(int)
    a2 = np.nan_to_num(d.a2, nan=-1).astype(int)
    pi1 = policy.decide_arrays(1, cov)
    q1 = suite.by_arm("m_mu2", pi1, cov, np.ones(n, bool))
    alive1 = (d.a1 == pi1) & (d.c1 == 0) & (d.s1 == 1)
    pi2 = np.full(n, -1)
    reached = d.reached2
    if reached.any():
        pi2[reached] = policy.decide_arrays(2, {k: v[reached] for k, v in cov.items()})
    alive2 = alive1 & (d.a2 == pi2) & (d.c2 == 0) & (d.s2 == 1)
    arms = np.column_stack([a1, a2])
    w1 = np.zeros(n)
    w1[alive1] = 1.0 / (suite.by_arm("phi1", a1, cov, alive1)[alive1] * suite.by_arm("p1", a1, cov, alive1)[alive1])
    w2 = np.zeros(n)
    w2[alive2] = 1.0 / (suite.by_arm("phi2", arms, cov, alive2)[alive2] * suite.by_arm("p2", arms, cov, alive2)[alive2])
    q2 = suite.by_arm("mu2", np.column_stack([a1, pi2]), cov, alive1)
    term = q1.copy()
    term[alive1] += w1[alive1] * (q2[alive1] - q1[alive1])
    term[alive2] += w1[alive2] * w2[alive2] * (d.y[alive2] - q2[alive2])
    return term


def v_aipw(d: Dataset, policy, death_as_censoring_suite: NuisanceSuite) -> EstimateReport:
    """Two-stage AIPW estimate that treats death as censoring; influence-function SE."""
    term = aipw_terms(d, policy, death_as_censoring_suite)
    if not np.all(np.isfinite(term)):
        raise NonpositiveDenominator(float("nan"))
    value = _fsum_mean(term)
    se = math.sqrt(np.mean((term - value) ** 2) / d.n)
    return _report("aipw", value, se, d.n, 1.0, death_as_censoring_suite.notes)
