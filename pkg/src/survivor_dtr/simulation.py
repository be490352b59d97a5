"""Simulation engine: the two benchmark data-generating processes, ground-truth
oracles and the replication harness for evaluation and learning experiments.

Every model of a DGP is a logistic or linear predictor written as a mapping
from feature terms (see :mod:`survivor_dtr.features`) to coefficients, so a
custom DGP is just another coefficient table.  Potential outcomes share one
uniform (or normal) draw per subject and indicator across arms.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import SurvivorDTRError
from .estimators import v_ipw, v_mr, v_q_plugin
from .features import FeatureMap
from .nuisance import ARMS1, ARMS2, FunctionModel, NuisanceSuite, ScenarioSpec, fit_suite
from .policy import DEConfig, LinearPolicy, learn, pcd_as
from .trajectory import Dataset

log = logging.getLogger(__name__)

MODELS = ("e1", "c1", "p1", "x2_mean", "e2", "c2", "p2", "mu2")

DGP1 = {
    "e1": {"1": 0.3, "x1": 0.2},
    "c1": {"x1": 1.0, "a1": 1.0},
    "p1": {"x1": 5.0, "a1": 3.0, "a1*x1": 0.5},
    "x2_mean": {"1": 0.2, "x1": 0.3, "a1": 1.5, "a1*x1": 0.75},
    "e2": {"1": 0.7, "x1": 0.2, "x2": -0.2, "x2^2": -0.1},
    "c2": {"1": -3.0, "x1": 1.0, "x2": 1.0, "a2": 0.5, "a2*x2": 1.0},
    "p2": {"1": 0.8, "x1": -1.42, "a1": 0.8, "a2": -0.65},
    "mu2": {"1": 2.58, "x1": -1.04, "a1": 1.21, "a1*x1": -0.92, "x2": 2.27,
            "a2": 1.18, "a1*a2": 3.29, "a2*x2": 3.95},
}

DGP2 = {
    "e1": {"1": 0.5, "x1^2": 0.5},
    "c1": {"x1^2": 1.0},
    "p1": {"x1^2": 3.0, "a1": 5.0, "a1*x1": -0.5},
    "x2_mean": {"1": 0.5, "x1^2": -0.3, "a1": 1.0, "a1*x1": -0.5},
    "e2": {"1": 0.7, "x1^2": -0.5, "x2": 0.5, "x2^2": -0.1},
    "c2": {"1": -3.0, "x1": 1.0, "x2": 1.0, "a2": 0.5, "a2*x2": 1.0},
    "p2": {"1": 0.5, "x1": 2.0, "x1*x2": 1.0, "a1": -0.8, "a2": 0.65},
    "mu2": {"1": -3.0, "x1": 1.0, "a1": 1.5, "a1*x1": -0.5, "exp(x2)": 0.01,
            "a2": 1.5, "a1*a2": 1.0, "a2*x2": -0.5},
}

PRESET_SETTINGS = {
    "dgp1": dict(coefficients=DGP1, eta1=2.0, eta2=3.5, sd_x2=1.5, sd_y=1.5, x1_low=-0.3, x1_high=0.7),
    "dgp2": dict(coefficients=DGP2, eta1=2.5, eta2=4.0, sd_x2=1.5, sd_y=1.5, x1_low=-0.3, x1_high=0.7),
}

# Rounded true optimal linear policy for dgp1 (see true_optimal_policy); used as
# the fixed evaluation policy of the off-policy evaluation experiment.
DEFAULT_EVAL_POLICY = {"beta1": [0.96, -0.26], "beta2": [0.79, 0.0, -0.1, 0.61], "feature_map_2": "x1,a1,x2"}


@dataclass(frozen=True)
class SimConfig:
    """A data-generating process plus sample size and seed.

    ``coefficients[model]`` maps feature terms over ``x1, x2, a1, a2`` to
    coefficients; ``e*``, ``c*``, ``p*`` are logits of the probability of
    treatment, of remaining uncensored and of surviving.  ``eta1``/``eta2`` are
    added to the censoring logits.
    """

    preset: str = "dgp1"
    coefficients: Mapping[str, Mapping[str, float]] = None
    eta1: float = 2.0
    eta2: float = 3.5
    sd_x2: float = 1.5
    sd_y: float = 1.5
    x1_low: float = -0.3
    x1_high: float = 0.7
    n: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.coefficients is None:
            if self.preset not in PRESET_SETTINGS:
                raise ValueError(f"custom configuration needs coefficients (preset {self.preset!r})")
            object.__setattr__(self, "coefficients", PRESET_SETTINGS[self.preset]["coefficients"])
        coefs = {m: dict(self.coefficients.get(m, {})) for m in MODELS}
        object.__setattr__(self, "coefficients", coefs)
        if self.sd_x2 <= 0 or self.sd_y < 0 or not self.x1_low < self.x1_high or self.n < 1:
            raise ValueError("invalid simulation configuration")

    @classmethod
    def from_preset(cls, name="dgp1", **overrides):
        if name not in PRESET_SETTINGS:
            raise ValueError(f"unknown preset {name!r}; choose dgp1 or dgp2")
        settings = dict(PRESET_SETTINGS[name])
        coefs = {m: dict(v) for m, v in settings.pop("coefficients").items()}
        for m, upd in overrides.pop("coefficients", {}).items():
            coefs[m] = dict(upd)
        preset = name if not overrides.get("custom") else "custom"
        overrides.pop("custom", None)
        settings.update(overrides)
        return cls(preset=preset, coefficients=coefs, **settings)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


def _linear(coefs: Mapping[str, float], cov) -> np.ndarray:
    shape = np.broadcast_shapes(*(np.shape(v) for v in cov.values()))
    if not coefs:
        return np.zeros(shape)
    flat = {k: np.broadcast_to(v, shape).ravel() for k, v in cov.items()}
    terms = tuple(coefs)
    X = FeatureMap(terms)(flat)
    return (X @ np.array([coefs[t] for t in terms])).reshape(shape)


def _arm_terms(coefs: Mapping[str, float]):
    """Covariate parts of the terms once treatment factors are fixed (always with an intercept)."""
    parts = ["1"]
    for term in coefs:
        factors = [f for f in term.replace(" ", "").split("*") if f not in ("a1", "a2", "1")]
        name = "*".join(factors) if factors else "1"
        if name not in parts:
            parts.append(name)
    return FeatureMap(tuple(parts))


def correct_bases(config: SimConfig) -> dict:
    """Per-arm feature maps that contain every term of the true models."""
    c = config.coefficients
    smooth = FeatureMap(("1", "ns(x1)"))
    return {
        "e1": _arm_terms(c["e1"]),
        "c1": _arm_terms(c["c1"]),
        "p1": _arm_terms(c["p1"]),
        "e2": _arm_terms(c["e2"]),
        "c2": _arm_terms(c["c2"]),
        "p2": _arm_terms(c["p2"]),
        "mu2": _arm_terms(c["mu2"]),
        "m_p2": smooth,
        "m_mu2": smooth,
    }


def scenario(name: str, config: SimConfig) -> ScenarioSpec:
    return ScenarioSpec.preset(name, bases=correct_bases(config))


# --------------------------------------------------------------------------
# true models
# --------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)
_Z_RANGE = 8.5


def _gl_segment(lo, hi):
    """Nodes (n, q) and weights (n, q) for integrating against the standard normal on [lo, hi]."""
    half = (hi - lo)[:, None] / 2.0
    mid = (hi + lo)[:, None] / 2.0
    z = mid + half * _GL_NODES[None, :]
    w = half * _GL_WEIGHTS[None, :] * np.exp(-0.5 * z**2) / math.sqrt(2 * math.pi)
    return z, w


class TrueModels:
    """Analytic nuisance functions of a :class:`SimConfig` (no trimming)."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.c = config.coefficients

    @staticmethod
    def _cov(x1, a1=None, x2=None, a2=None):
        x1 = np.asarray(x1, dtype=float)
        cov = {"x1": x1}
        if a1 is not None:
            cov["a1"] = np.asarray(a1, dtype=float)
        if x2 is not None:
            cov["x2"] = np.asarray(x2, dtype=float)
        if a2 is not None:
            cov["a2"] = np.asarray(a2, dtype=float)
        return cov

    def e1(self, x1):
        return expit(_linear(self.c["e1"], self._cov(x1)))

    def c1(self, a1, x1):
        return expit(_linear(self.c["c1"], self._cov(x1, a1)) + self.config.eta1)

    def p1(self, a1, x1):
        return expit(_linear(self.c["p1"], self._cov(x1, a1)))

    def x2_mean(self, a1, x1):
        return _linear(self.c["x2_mean"], self._cov(x1, a1))

    def e2(self, x1, a1, x2):
        return expit(_linear(self.c["e2"], self._cov(x1, a1, x2)))

    def c2(self, a1, a2, x1, x2):
        return expit(_linear(self.c["c2"], self._cov(x1, a1, x2, a2)) + self.config.eta2)

    def p2(self, a1, a2, x1, x2):
        return expit(_linear(self.c["p2"], self._cov(x1, a1, x2, a2)))

    def mu2(self, a1, a2, x1, x2):
        return _linear(self.c["mu2"], self._cov(x1, a1, x2, a2))

    # draws --------------------------------------------------------------
    def draw_x1(self, rng, m):
        return rng.uniform(self.config.x1_low, self.config.x1_high, m)

    def draw_x2(self, rng, x1, a1):
        return self.x2_mean(a1, x1) + self.config.sd_x2 * rng.standard_normal(len(x1))

    # integrals over X2 | X1, A1 -------------------------------------------
    def expect_x2(self, fn, a1, x1, split=None):
        """``E[fn(X2) | x1, a1]`` by Gauss-Legendre on the standardized scale.

        ``split`` (per row, on the X2 scale) places a breakpoint so integrands
        with one jump (a policy switching on ``x2``) are integrated exactly.
        """
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        n = x1.size
        mean = self.x2_mean(a1, x1)
        sd = self.config.sd_x2
        lo = np.full(n, -_Z_RANGE)
        hi = np.full(n, _Z_RANGE)
        if split is None:
            segments = [(lo, hi)]
        else:
            zs = np.clip((np.asarray(split, dtype=float) - mean) / sd, -_Z_RANGE, _Z_RANGE)
            segments = [(lo, zs), (zs, hi)]
        total = np.zeros(n)
        for a, b in segments:
            z, w = _gl_segment(a, b)
            x2 = mean[:, None] + sd * z
            vals = fn(np.repeat(x1[:, None], z.shape[1], axis=1), x2)
            total += np.sum(w * vals, axis=1)
        # mass beyond +-_Z_RANGE is below 1e-16
        return total

    def m_p2(self, a1, a2, x1):
        return self.expect_x2(lambda x1_, x2_: self.p2(a1, a2, x1_, x2_), a1, x1)

    def principal_weight(self, x1):
        """``p1^0(x1) m_p2^00(x1)``: conditional probability of always surviving under monotonicity."""
        return self.p1(0, x1) * self.m_p2(0, 0, x1)

    def stage2_split(self, policy: LinearPolicy, a1, x1):
        """Per-row ``x2`` where the stage-2 rule switches (``None`` if it never depends on ``x2``)."""
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        base = {"x1": x1, "a1": np.full(x1.shape, float(a1))}
        s0 = policy.history(2, {**base, "x2": np.zeros_like(x1)}) @ policy.beta2
        s1 = policy.history(2, {**base, "x2": np.ones_like(x1)}) @ policy.beta2
        slope = s1 - s0
        with np.errstate(divide="ignore", invalid="ignore"):
            split = np.where(slope != 0, -s0 / slope, np.inf)
        return split

    def m_mu2(self, policy: LinearPolicy, a1, x1):
        """``E[mu2^{a1, pi2(x1, a1, X2)}(x1, X2) | x1, a1]``."""
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))

        def integrand(x1_, x2_):
            shape = x1_.shape
            cov = {"x1": x1_.ravel(), "a1": np.full(x1_.size, float(a1)), "x2": x2_.ravel()}
            d2 = policy.decide_arrays(2, cov).reshape(shape)
            return np.where(d2 == 1, self.mu2(a1, 1, x1_, x2_), self.mu2(a1, 0, x1_, x2_))

        return self.expect_x2(integrand, a1, x1, split=self.stage2_split(policy, a1, x1))

    def value_integrand(self, policy: LinearPolicy, x1):
        """``m_mu2^pi(x1)`` evaluated at ``pi1(x1)``."""
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        d1 = policy.decide_arrays(1, {"x1": x1})
        out = np.empty(x1.size)
        for a in ARMS1:
            sel = d1 == a
            if sel.any():
                out[sel] = self.m_mu2(policy, a, x1[sel])
        return out


def true_suite(config: SimConfig, policy: LinearPolicy | None = None, eps=0.0) -> NuisanceSuite:
    """Nuisance suite holding the analytic true models (trimming off by default)."""
    t = TrueModels(config)

    def f(fn):
        return FunctionModel(fn)

    e1 = f(lambda cov: t.e1(cov["x1"]))
    c1 = {a: f(lambda cov, a=a: t.c1(a, cov["x1"])) for a in ARMS1}
    p1 = {a: f(lambda cov, a=a: t.p1(a, cov["x1"])) for a in ARMS1}
    e2 = {a: f(lambda cov, a=a: t.e2(cov["x1"], a, cov["x2"])) for a in ARMS1}
    c2 = {arm: f(lambda cov, arm=arm: t.c2(*arm, cov["x1"], cov["x2"])) for arm in ARMS2}
    p2 = {arm: f(lambda cov, arm=arm: t.p2(*arm, cov["x1"], cov["x2"])) for arm in ARMS2}
    mu2 = {arm: f(lambda cov, arm=arm: t.mu2(*arm, cov["x1"], cov["x2"])) for arm in ARMS2}
    m_p2 = {arm: f(lambda cov, arm=arm: t.m_p2(*arm, cov["x1"])) for arm in ARMS2}
    m_mu2 = None
    if policy is not None:
        m_mu2 = {a: f(lambda cov, a=a: t.m_mu2(policy, a, cov["x1"])) for a in ARMS1}
    return NuisanceSuite(e1, c1, p1, e2, c2, p2, mu2, m_p2, m_mu2, policy, eps=eps)


# --------------------------------------------------------------------------
# data generation
# --------------------------------------------------------------------------

def _rng(seed, replication):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replication)]))


def simulate(config: SimConfig, replication: int = 0) -> Dataset:
    """Draw ``config.n`` monotone trajectories.

    Gates are applied in the order C1, S1, stage 2, C2, S2, Y; the random
    numbers for every indicator are drawn for all subjects up front so each
    (seed, replication) pair determines the dataset.
    """
    t = TrueModels(config)
    rng = _rng(config.seed, replication)
    n = config.n
    x1 = t.draw_x1(rng, n)
    u = rng.random((n, 6))
    z = rng.standard_normal((n, 2))
    a1 = (u[:, 0] < t.e1(x1)).astype(float)
    c1 = (u[:, 1] >= t.c1(a1, x1)).astype(float)
    s1 = np.where(c1 == 0, (u[:, 2] < t.p1(a1, x1)).astype(float), np.nan)
    reached = (c1 == 0) & (s1 == 1)
    x2_all = t.x2_mean(a1, x1) + config.sd_x2 * z[:, 0]
    x2 = np.where(reached, x2_all, np.nan)
    a2_all = (u[:, 3] < t.e2(x1, a1, x2_all)).astype(float)
    a2 = np.where(reached, a2_all, np.nan)
    c2_all = (u[:, 4] >= t.c2(a1, a2_all, x1, x2_all)).astype(float)
    c2 = np.where(reached, c2_all, np.nan)
    s2_all = (u[:, 5] < t.p2(a1, a2_all, x1, x2_all)).astype(float)
    s2 = np.where(reached & (c2_all == 0), s2_all, np.nan)
    observed = reached & (c2_all == 0) & (s2_all == 1)
    y_all = t.mu2(a1, a2_all, x1, x2_all) + config.sd_y * z[:, 1]
    y = np.where(observed, y_all, np.nan)
    return Dataset(x1[:, None], a1, c1, s1, x2[:, None], a2, c2, s2, y)


@dataclass
class PotentialOutcomes:
    """Coupled potential quantities for every arm (simulation oracle only)."""

    x1: np.ndarray
    s1: dict
    x2: dict
    s2: dict
    y: dict

    @property
    def always_survivor(self):
        return np.all([self.s2[arm] == 1 for arm in ARMS2], axis=0)


def simulate_potential(config: SimConfig, m: int, seed=0) -> PotentialOutcomes:
    """Potential survival, intermediate covariate and outcome under every arm.

    A single uniform per subject and stage is compared against every arm's
    survival probability, so potential indicators are ordered whenever the
    probabilities are.
    """
    t = TrueModels(config)
    rng = _rng(seed, 0x9E7)
    x1 = t.draw_x1(rng, m)
    u1, u2 = rng.random(m), rng.random(m)
    z2, zy = rng.standard_normal(m), rng.standard_normal(m)
    s1 = {a: (u1 < t.p1(a, x1)).astype(int) for a in ARMS1}
    x2 = {a: t.x2_mean(a, x1) + config.sd_x2 * z2 for a in ARMS1}
    s2 = {(a, b): s1[a] * (u2 < t.p2(a, b, x1, x2[a])) for a, b in ARMS2}
    y = {(a, b): t.mu2(a, b, x1, x2[a]) + config.sd_y * zy for a, b in ARMS2}
    return PotentialOutcomes(x1, s1, x2, s2, y)


def is_monotone(config: SimConfig, m=20_000, seed=0) -> bool:
    """Whether arm (0, 0) has the smallest survival probabilities on a sample of the covariate space."""
    t = TrueModels(config)
    rng = _rng(seed, 0x303)
    x1 = t.draw_x1(rng, m)
    if np.any(t.p1(1, x1) < t.p1(0, x1)):
        return False
    for a in ARMS1:
        x2 = t.draw_x2(rng, x1, a)
        base = t.p2(0, 0, x1, t.x2_mean(0, x1) + (x2 - t.x2_mean(a, x1)))
        for b in (0, 1):
            if np.any(t.p2(a, b, x1, x2) < base):
                return False
    return True


# --------------------------------------------------------------------------
# ground truth
# --------------------------------------------------------------------------

@dataclass
class TruthResult:
    value: float
    se: float
    m: int


def true_value(policy: LinearPolicy, config: SimConfig, m=1_000_000, seed=0, inner=None, chunk=200_000,
               return_se=False):
    """Always-survivor value of ``policy`` by the plug-in with the true models.

    ``X1`` is drawn ``m`` times; the conditional expectations over ``X2`` are
    computed by Gauss-Legendre quadrature (split at the stage-2 switching
    point), or by ``inner`` Monte Carlo draws per ``X1`` when ``inner`` is set.
    With ``return_se`` a :class:`TruthResult` carrying the Monte Carlo standard
    error of the ratio is returned.
    """
    t = TrueModels(config)
    rng = _rng(seed, 0x7A1)
    nums, dens = [], []
    done = 0
    while done < m:
        k = min(chunk, m - done)
        x1 = t.draw_x1(rng, k)
        w = t.principal_weight(x1)
        if inner is None:
            g = t.value_integrand(policy, x1)
        else:
            d1 = policy.decide_arrays(1, {"x1": x1})
            g = np.zeros(k)
            for _ in range(inner):
                x2 = t.draw_x2(rng, x1, d1)
                cov = {"x1": x1, "a1": d1.astype(float), "x2": x2}
                d2 = policy.decide_arrays(2, cov)
                g += np.where(d2 == 1, t.mu2(d1, 1, x1, x2), t.mu2(d1, 0, x1, x2))
            g /= inner
        nums.append(w * g)
        dens.append(w)
        done += k
    nums = np.concatenate(nums)
    dens = np.concatenate(dens)
    value = float(np.sum(nums) / np.sum(dens))
    if not return_se:
        return value
    resid = (nums - value * dens) / dens.mean()
    return TruthResult(value, float(resid.std(ddof=1) / math.sqrt(m)), m)


def true_value_rejection(policy: LinearPolicy, config: SimConfig, m=1_000_000, seed=0) -> TruthResult:
    """Always-survivor value by direct sampling: keep subjects surviving under all four
    arm pairs and average their potential outcome under ``policy``.

    Only meaningful for monotone configurations (see :func:`is_monotone`).
    """
    po = simulate_potential(config, m, seed)
    keep = po.always_survivor
    x1 = po.x1[keep]
    d1 = policy.decide_arrays(1, {"x1": x1})
    x2 = np.where(d1 == 1, po.x2[1][keep], po.x2[0][keep])
    d2 = policy.decide_arrays(2, {"x1": x1, "a1": d1.astype(float), "x2": x2})
    y = np.zeros(x1.size)
    for arm in ARMS2:
        sel = (d1 == arm[0]) & (d2 == arm[1])
        y[sel] = po.y[arm][keep][sel]
    return TruthResult(float(y.mean()), float(y.std(ddof=1) / math.sqrt(y.size)), int(keep.sum()))


def marginal_rates(d: Dataset) -> dict:
    """Censoring and survival rates per stage (stage 2 among subjects reaching it)."""
    reached = d.reached2
    return {
        "treat1": float(np.mean(d.a1)),
        "censor1": float(np.mean(d.c1)),
        "survive1": float(np.mean(d.s1[d.c1 == 0])),
        "censor2": float(np.mean(d.c2[reached])),
        "survive2": float(np.mean(d.s2[reached & (d.c2 == 0)])),
    }


def default_eval_policy() -> LinearPolicy:
    return LinearPolicy.from_dict(DEFAULT_EVAL_POLICY)


# --------------------------------------------------------------------------
# replication harness
# --------------------------------------------------------------------------

@dataclass
class ReplicationSummary:
    estimator: str
    scenario: str
    n: int
    values: list
    truth: float
    bias: float
    se: float | None
    coverage: float | None
    failures: int = 0
    pcd_as_mean: float | None = None
    pcd_as_sd: float | None = None
    records: list = field(default_factory=list)

    @classmethod
    def from_records(cls, estimator, scenario, n, records, truth, failures=0):
        values = [r["value"] for r in records]
        if values:
            bias = float(np.mean(values) - truth)
            se = float(np.std(values, ddof=1)) if len(values) > 1 else None
        else:
            bias, se = float("nan"), None
        covers = [r["covers"] for r in records if r.get("covers") is not None]
        coverage = float(np.mean(covers)) if covers else None
        pcds = [r["pcd_as"] for r in records if r.get("pcd_as") is not None]
        pcd_mean = float(np.mean(pcds)) if pcds else None
        pcd_sd = float(np.std(pcds, ddof=1)) if len(pcds) > 1 else None
        return cls(estimator, scenario, n, values, truth, bias, se, coverage, failures, pcd_mean, pcd_sd,
                   list(records))

    def to_dict(self):
        out = dataclasses.asdict(self)
        out.pop("records")
        out.pop("values")
        out["reps"] = len(self.values)
        return out


def _ope_task(args):
    config, scenarios, n, rep, policy_dict, estimators, bootstrap = args
    policy = LinearPolicy.from_dict(policy_dict)
    cfg = config.replace(n=n)
    out = []
    try:
        d = simulate(cfg, rep)
    except SurvivorDTRError as exc:
        return [(s, est, rep, None, str(exc)) for s in scenarios for est in estimators]
    for s in scenarios:
        spec = scenario(s, cfg)
        try:
            suite = fit_suite(d, spec, policy)
        except SurvivorDTRError as exc:
            out.extend((s, est, rep, None, str(exc)) for est in estimators)
            continue
        for est in estimators:
            try:
                if est == "mr":
                    r = v_mr(d, policy, suite)
                elif est == "q_plugin":
                    r = v_q_plugin(d, policy, suite, B=bootstrap, seed=rep)
                elif est == "ipw":
                    r = v_ipw(d, policy, suite, B=bootstrap, seed=rep)
                else:
                    raise ValueError(f"unknown estimator {est!r}")
                out.append((s, est, rep, r.to_dict(), None))
            except SurvivorDTRError as exc:
                out.append((s, est, rep, None, str(exc)))
    return out


def _map(fn, tasks, workers):
    if workers is None or workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def run_ope_experiment(config: SimConfig, scenarios: Sequence[str] = ("M1",), n_list: Sequence[int] = (2000,),
                       reps=500, policy: LinearPolicy | None = None, seed=0, estimators=("mr",), truth=None,
                       truth_m=1_000_000, bootstrap=0, workers=1):
    """Repeated off-policy evaluation on fresh datasets.

    Replication ``r`` of sample size ``n`` uses dataset seed
    ``SeedSequence([seed, r])`` (shared across scenarios and estimators).
    Per-replication failures are counted, not raised.

    Returns
    -------
    list of ReplicationSummary, one per (scenario, n, estimator).
    """
    policy = policy or default_eval_policy()
    config = config.replace(seed=seed)
    if truth is None:
        truth = true_value(policy, config, m=truth_m, seed=seed)
    summaries = []
    for n in n_list:
        tasks = [(config, tuple(scenarios), n, r, policy.to_dict(), tuple(estimators), bootstrap)
                 for r in range(reps)]
        results = [row for chunk in _map(_ope_task, tasks, workers) for row in chunk]
        for s in scenarios:
            for est in estimators:
                records, failures = [], 0
                for sc, e, rep, rec, err in results:
                    if sc != s or e != est:
                        continue
                    if rec is None:
                        failures += 1
                        log.warning("replication %d (%s, %s, n=%d) failed: %s", rep, s, est, n, err)
                        continue
                    rec = dict(rec, replication=rep, scenario=s, n=n, truth=truth,
                               covers=bool(rec["ci_low"] <= truth <= rec["ci_high"]) if math.isfinite(rec["se"])
                               else None)
                    records.append(rec)
                summaries.append(ReplicationSummary.from_records(est, s, n, records, truth, failures))
    return summaries


def _opl_task(args):
    config, n, rep, objectives, de_dict, star_dict, truth_star, value_m, pcd_m = args
    star = LinearPolicy.from_dict(star_dict)
    cfg = config.replace(n=n)
    out = []
    d = simulate(cfg, rep)
    spec = scenario("M1", cfg)
    for obj in objectives:
        try:
            de = DEConfig(**dict(de_dict, seed=int(np.random.SeedSequence([config.seed, rep]).generate_state(1)[0])))
            res = learn(d, spec, obj, de)
            v_true = true_value(res.policy, cfg, m=value_m, seed=rep)
            rec = res.value_report.to_dict()
            rec.update(
                objective=obj,
                replication=rep,
                n=n,
                true_value_hat=v_true,
                truth_star=truth_star,
                covers=bool(rec["ci_low"] <= truth_star <= rec["ci_high"]),
                pcd_as=pcd_as(res.policy, star, cfg, m=pcd_m, seed=rep),
                policy=json.dumps(res.policy.to_dict()),
                evaluations=res.evaluations,
            )
            out.append((obj, rep, rec, None))
        except SurvivorDTRError as exc:
            out.append((obj, rep, None, str(exc)))
    return out


def run_opl_experiment(config: SimConfig, n_list: Sequence[int] = (2000,), reps=100, objectives=("mr", "aipw"),
                       seed=0, de_config: DEConfig = DEConfig(), policy_star: LinearPolicy | None = None,
                       star_m=100_000, truth_m=200_000, value_m=100_000, pcd_m=100_000, workers=1):
    """Repeated policy learning under the correctly specified scenario.

    Each replication learns one policy per objective and records its
    estimated value, its true value, coverage of the true optimal value by the
    interval, and PCD-AS against ``policy_star`` (computed with
    :func:`~survivor_dtr.policy.true_optimal_policy` when not given).
    """
    from .policy import true_optimal_policy

    config = config.replace(seed=seed)
    if policy_star is None:
        policy_star = true_optimal_policy(config, m=star_m, de_config=de_config, seed=seed)
    truth_star = true_value(policy_star, config, m=truth_m, seed=seed)
    de_dict = {k: v for k, v in dataclasses.asdict(de_config).items() if k != "seed"}
    summaries = []
    for n in n_list:
        tasks = [(config, n, r, tuple(objectives), de_dict, policy_star.to_dict(), truth_star, value_m, pcd_m)
                 for r in range(reps)]
        results = [row for chunk in _map(_opl_task, tasks, workers) for row in chunk]
        for obj in objectives:
            records, failures = [], 0
            for o, rep, rec, err in results:
                if o != obj:
                    continue
                if rec is None:
                    failures += 1
                    continue
                records.append(rec)
            summaries.append(ReplicationSummary.from_records(obj, "M1", n, records, truth_star, failures))
    return summaries


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def write_records(summaries: Sequence[ReplicationSummary], path):
    """Long-format CSV of every replication record."""
    rows = [dict(r, estimator=s.estimator) for s in summaries for r in s.records]
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})


def write_summaries(summaries: Sequence[ReplicationSummary], directory, prefix="summary"):
    """One JSON summary per (scenario, n, estimator)."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for s in summaries:
        path = os.path.join(directory, f"{prefix}_{s.scenario}_n{s.n}_{s.estimator}.json")
        with open(path, "w") as fh:
            json.dump(s.to_dict(), fh, indent=2, sort_keys=True)
        paths.append(path)
    return paths
