"""Nuisance models: propensity, censoring, survival, outcome regressions and
their stage-1 conditional means.

Binary models are logistic regressions fitted by iteratively reweighted least
squares; mean models are least squares fits on a (possibly spline) basis.
Every arm-specific model is fitted separately on the rows of its arm, so a
correctly specified arm model only needs the covariate terms of the truth.
"""
from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import qr
from scipy.special import expit

from .errors import ArmNotFitted, EmptyStratum
from .features import FeatureMap
from .trajectory import Dataset, covariate_dict

log = logging.getLogger(__name__)

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
RIDGE = 1e-10
DEFAULT_EPS = 0.01

ARMS1 = (0, 1)
ARMS2 = ((0, 0), (0, 1), (1, 0), (1, 1))

BINARY_NUISANCES = ("e1", "c1", "p1", "e2", "c2", "p2")
MEAN_NUISANCES = ("mu2", "m_p2", "m_mu2")
NUISANCES = BINARY_NUISANCES + MEAN_NUISANCES


class SeparationWarning(UserWarning):
    pass


class DegenerateDesignWarning(UserWarning):
    pass


def independent_columns(X, rtol=1e-10):
    """Indices of a maximal set of linearly independent columns (pivoted QR)."""
    if X.shape[1] == 0:
        return np.arange(0)
    _, r, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0:
        return np.arange(0)
    rank = int(np.sum(diag > rtol * diag[0] * max(X.shape)))
    return np.sort(piv[:rank])


def _keep_columns(X):
    keep = independent_columns(X)
    if keep.size < X.shape[1]:
        dropped = sorted(set(range(X.shape[1])) - set(keep.tolist()))
        warnings.warn(f"rank-deficient design; dropping columns {dropped}", DegenerateDesignWarning, stacklevel=3)
    return keep


@dataclass(frozen=True)
class BinaryModel:
    """Logistic model ``P(label = 1 | features) = expit(features @ coef)``."""

    coef: np.ndarray
    feature_map: FeatureMap | None = None
    n_iter: int = 0
    loglik: float = float("nan")
    converged: bool = True
    separated: bool = False
    dropped: tuple = ()

    def predict_features(self, X):
        return expit(np.asarray(X, dtype=float) @ self.coef)

    def predict(self, cov):
        return self.predict_features(self.feature_map(cov))


@dataclass(frozen=True)
class MeanModel:
    """Linear predictor on a feature map, optionally clipped to ``[-clip, clip]``."""

    coef: np.ndarray
    feature_map: FeatureMap | None = None
    clip: float | None = None
    dropped: tuple = ()

    def predict_features(self, X):
        value = np.asarray(X, dtype=float) @ self.coef
        if self.clip is not None:
            value = np.clip(value, -self.clip, self.clip)
        return value

    def predict(self, cov):
        return self.predict_features(self.feature_map(cov))


@dataclass(frozen=True)
class ConstantModel:
    value: float

    def predict(self, cov):
        n = len(next(iter(cov.values())))
        return np.full(n, float(self.value))


@dataclass(frozen=True)
class FunctionModel:
    """Wraps a known function of the covariate mapping (true models, test doubles)."""

    fn: Callable

    def predict(self, cov):
        return np.asarray(self.fn(cov), dtype=float)


def fit_logistic(X, y, weights=None, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER, ridge=RIDGE) -> BinaryModel:
    """Maximum-likelihood logistic regression by IRLS.

    Converged when the largest absolute coefficient update is below ``tol``.
    Rank-deficient designs have redundant columns dropped (coefficient 0) with
    a :class:`DegenerateDesignWarning`.  When the likelihood has no finite
    maximizer (complete separation, a single label class) the last iterate is
    returned with ``separated=True`` and a :class:`SeparationWarning`.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    keep = _keep_columns(X)
    Xk = X[:, keep]
    beta = np.zeros(keep.size)
    converged = separated = False
    it = 0
    eta = np.zeros(n)
    for it in range(1, max_iter + 1):
        p = expit(eta)
        W = w * p * (1.0 - p)
        H = Xk.T @ (W[:, None] * Xk) + ridge * np.eye(keep.size)
        g = Xk.T @ (w * (y - p))
        step = np.linalg.solve(H, g)
        beta = beta + step
        eta = Xk @ beta
        if np.max(np.abs(step), initial=0.0) < tol:
            converged = True
            break
        if np.max(np.abs(eta), initial=0.0) > 30.0:
            separated = True
            break
    p = expit(eta)
    with np.errstate(divide="ignore"):
        loglik = float(np.sum(w * (y * np.log(p) + (1 - y) * np.log1p(-p))))
    if not converged:
        separated = True
    if separated:
        warnings.warn("logistic likelihood is unbounded (separation); returning last iterate",
                      SeparationWarning, stacklevel=2)
    coef = np.zeros(d)
    coef[keep] = beta
    dropped = tuple(sorted(set(range(d)) - set(keep.tolist())))
    return BinaryModel(coef, None, it, loglik, converged, separated, dropped)


def fit_mean(X, y, clip=None) -> MeanModel:
    """Least squares on the given design; predictions clipped to ``±clip`` when set."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < X.shape[1]:
        warnings.warn("fewer observations than features", DegenerateDesignWarning, stacklevel=2)
    keep = _keep_columns(X)
    beta, *_ = np.linalg.lstsq(X[:, keep], y, rcond=None)
    coef = np.zeros(X.shape[1])
    coef[keep] = beta
    dropped = tuple(sorted(set(range(X.shape[1])) - set(keep.tolist())))
    return MeanModel(coef, None, clip, dropped)


# --------------------------------------------------------------------------
# scenario specifications
# --------------------------------------------------------------------------

def generic_bases(p1=1, p2=1):
    """Default 'correct' bases for arbitrary data: linear terms, additive splines for m-models."""
    x1 = [f"x1_{j + 1}" for j in range(p1)] if p1 > 1 else ["x1"]
    x2 = [f"x2_{j + 1}" for j in range(p2)] if p2 > 1 else ["x2"]
    stage1 = FeatureMap(tuple(["1"] + x1))
    stage2 = FeatureMap(tuple(["1"] + x1 + x2))
    smooth = FeatureMap(tuple(["1"] + [f"ns({v})" for v in x1]))
    return {
        "e1": stage1, "c1": stage1, "p1": stage1,
        "e2": stage2, "c2": stage2, "p2": stage2, "mu2": stage2,
        "m_p2": smooth, "m_mu2": smooth,
    }


MEAN_LEARNERS: dict = {}


def register_mean_learner(name, fit):
    """Register ``fit(cov, y, clip) -> model with .predict(cov)`` under a flag name."""
    MEAN_LEARNERS[name] = fit


@dataclass(frozen=True)
class ScenarioSpec:
    """Per-nuisance specification flags.

    Flags are ``correct`` (use ``bases[name]``), ``intercept_only`` or
    ``no_intercept_exp`` (least squares on ``exp(x1)`` without intercept), or
    the name of a learner registered with :func:`register_mean_learner`.
    """

    name: str = "M1"
    flags: Mapping[str, str] = field(default_factory=dict)
    bases: Mapping[str, FeatureMap] | None = None

    PRESETS = {
        "M1": {},
        "M2": {"p2": "intercept_only", "m_p2": "no_intercept_exp"},
        "M3": {"e2": "intercept_only", "c2": "intercept_only", "m_p2": "no_intercept_exp"},
        "M4": {"mu2": "no_intercept_exp"},
        "M5": {"mu2": "no_intercept_exp", "m_mu2": "no_intercept_exp"},
        "M6": {"e1": "intercept_only", "c1": "intercept_only", "e2": "intercept_only",
               "c2": "intercept_only", "p1": "intercept_only"},
    }

    @classmethod
    def preset(cls, name, bases=None):
        if name not in cls.PRESETS:
            raise ValueError(f"unknown scenario {name!r}; choose from {sorted(cls.PRESETS)}")
        return cls(name, dict(cls.PRESETS[name]), bases)

    def flag(self, which):
        return self.flags.get(which, "correct")

    def feature_map(self, which, p1=1, p2=1) -> FeatureMap:
        flag = self.flag(which)
        if flag == "intercept_only":
            return FeatureMap(("1",))
        if flag == "no_intercept_exp":
            return FeatureMap(("exp(x1)",) if p1 == 1 else tuple(f"exp(x1_{j + 1})" for j in range(p1)))
        bases = self.bases if self.bases is not None else generic_bases(p1, p2)
        return bases[which]


# --------------------------------------------------------------------------
# the suite
# --------------------------------------------------------------------------

def _trim(values, eps, stats=None, key=None):
    if eps <= 0:
        return values
    out = np.clip(values, eps, 1.0 - eps)
    if stats is not None:
        stats[key] = stats.get(key, 0) + int(np.count_nonzero(out != values))
    return out


def _rows(cov, mask):
    return {k: v[mask] for k, v in cov.items()}


@dataclass(frozen=True)
class NuisanceSuite:
    """Fitted nuisance collection.

    ``e1`` models ``P(A1=1 | x1)`` and ``e2[a1]`` models ``P(A2=1 | x1, a1, x2)``;
    ``c*`` are probabilities of remaining uncensored, ``p*`` survival
    probabilities, ``mu2``/``m_p2`` outcome and eventual-survival regressions per
    arm pair, and ``m_mu2[a1]`` the policy-specific stage-1 outcome regression
    (``policy`` records which policy it belongs to).
    """

    e1: object
    c1: Mapping[int, object]
    p1: Mapping[int, object]
    e2: Mapping[int, object]
    c2: Mapping[tuple, object]
    p2: Mapping[tuple, object]
    mu2: Mapping[tuple, object]
    m_p2: Mapping[tuple, object]
    m_mu2: Mapping[int, object] | None = None
    policy: object = None
    eps: float = DEFAULT_EPS
    clip: float | None = None
    notes: tuple = ()

    def _model(self, which, arm):
        table = getattr(self, which)
        if which == "e1":
            return table
        if table is None:
            raise ArmNotFitted(which, arm)
        key = arm[0] if which in ("c1", "p1", "e2", "m_mu2") else tuple(arm)
        if key not in table or table[key] is None:
            raise ArmNotFitted(which, arm)
        return table[key]

    # scalar-arm evaluations over a covariate mapping ------------------------
    def prob(self, which, arm, cov, stats=None):
        """Trimmed probability for one arm.

        ``e1``/``e2`` return the probability of *receiving* ``arm[-1]``.
        ``phi1``/``phi2`` are the products ``e*c`` of the trimmed factors.
        """
        if which in ("phi1", "phi2"):
            k = which[-1]
            return self.prob("e" + k, arm, cov, stats) * self.prob("c" + k, arm, cov, stats)
        model = self._model(which, arm)
        raw = model.predict(cov)
        if which in ("e1", "e2") and arm[-1] == 0:
            raw = 1.0 - raw
        if isinstance(model, ConstantModel):  # structural constants are not estimates
            return raw
        return _trim(raw, self.eps, stats, which)

    def mean(self, which, arm, cov):
        value = self._model(which, arm).predict(cov)
        if self.clip is not None and which in ("mu2", "m_mu2"):
            value = np.clip(value, -self.clip, self.clip)
        return value

    # per-row arm evaluations -------------------------------------------------
    def by_arm(self, which, arms, cov, mask, stats=None):
        """Evaluate ``which`` at each row's own arm; ``NaN`` outside ``mask``.

        ``arms`` is an int array of shape (n,) for stage-1 quantities or (n, 2).
        """
        arms = np.asarray(arms)
        n = len(arms)
        out = np.full(n, np.nan)
        choices = ARMS1 if arms.ndim == 1 else ARMS2
        for arm in choices:
            arm_t = (arm,) if arms.ndim == 1 else arm
            sel = mask & (arms == arm if arms.ndim == 1 else np.all(arms == arm, axis=1))
            if not sel.any():
                continue
            sub = _rows(cov, sel)
            if which in ("mu2", "m_p2", "m_mu2"):
                out[sel] = self.mean(which, arm_t, sub)
            else:
                out[sel] = self.prob(which, arm_t, sub, stats)
        return out

    def with_policy_models(self, m_mu2, policy):
        return dataclasses.replace(self, m_mu2=m_mu2, policy=policy)


def evaluate(suite: NuisanceSuite, which, arm, point) -> float:
    """Evaluate one nuisance at a single covariate point.

    ``point`` is a mapping of covariate names to scalars (``{"x1": 0.2}``) or a
    pair ``(x1, x2)`` of vectors.  Probabilities are trimmed to ``[eps, 1-eps]``;
    ``mu2``/``m_mu2`` are clipped to ``±clip`` when configured.
    """
    arm = (arm,) if np.isscalar(arm) else tuple(arm)
    if isinstance(point, Mapping):
        cov = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in point.items()}
    else:
        x1, *rest = point
        x2 = rest[0] if rest else None
        a1 = arm[0] if which in ("e2", "c2", "p2", "mu2", "phi2") else None
        cov = covariate_dict(np.atleast_2d(x1), None if x2 is None else np.atleast_2d(x2), a1)
    if which in MEAN_NUISANCES:
        return float(suite.mean(which, arm, cov)[0])
    return float(suite.prob(which, arm, cov)[0])


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def _fit_binary(fmap, cov, label, mask, name, tol, max_iter):
    if not mask.any():
        raise EmptyStratum(name)
    sub = _rows(cov, mask)
    fmap = fmap.bind(sub)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_logistic(fmap(sub), label[mask], tol=tol, max_iter=max_iter)
    for w in caught:
        log.info("%s: %s", name, w.message)
    return dataclasses.replace(model, feature_map=fmap), [f"{name}: {w.message}" for w in caught]


def _fit_mean(fmap, cov, target, mask, name, clip, flag="correct"):
    if not mask.any():
        raise EmptyStratum(name)
    sub = _rows(cov, mask)
    if flag in MEAN_LEARNERS:
        return MEAN_LEARNERS[flag](sub, target[mask], clip), []
    fmap = fmap.bind(sub)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_mean(fmap(sub), target[mask], clip=clip)
    return dataclasses.replace(model, feature_map=fmap), [f"{name}: {w.message}" for w in caught]


def _union(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    terms = list(a.terms)
    terms += [t for t in b.terms if t not in terms]
    return FeatureMap(tuple(terms))


def fit_suite(d: Dataset, spec: ScenarioSpec | None = None, policy=None, *, eps=DEFAULT_EPS, clip=None,
              all_m_p2=False, death_as_censoring=False, tol=IRLS_TOL, max_iter=IRLS_MAX_ITER) -> NuisanceSuite:
    """Fit every nuisance model on ``d``.

    Parameters
    ----------
    spec : ScenarioSpec
        Which bases are used (correct or deliberately misspecified).
    policy : LinearPolicy, optional
        When given, the policy-specific stage-1 outcome regression is fitted too.
    all_m_p2 : bool
        Fit the eventual-survival regression for all four arm pairs (needed by
        the sensitivity analysis) instead of only ``(0, 0)``.
    death_as_censoring : bool
        Fit the censoring models on the composite indicator "censored or dead"
        and set survival models to 1 (the AIPW comparator).

    Raises
    ------
    EmptyStratum
        A conditioning set required by some model is empty.
    """
    spec = spec or ScenarioSpec()
    p1, p2 = d.p1, d.p2
    fm = {w: spec.feature_map(w, p1, p2) for w in NUISANCES}
    notes = []
    cov = d.covariates()
    a1 = d.a1
    a2 = np.nan_to_num(d.a2, nan=-1)
    reached = d.reached2
    uncens1 = d.c1 == 0
    uncens2 = reached & (d.c2 == 0)

    def binary(name, fmap, label, mask):
        model, msgs = _fit_binary(fmap, cov, label, mask, name, tol, max_iter)
        notes.extend(msgs)
        return model

    e1 = binary("e1", fm["e1"], a1, np.ones(d.n, bool))
    if death_as_censoring:
        alive1 = (uncens1 & (d.s1 == 1)).astype(float)
        alive2 = (uncens2 & (d.s2 == 1)).astype(float)
        c1 = {a: binary(f"c1^{a}", _union(fm["c1"], fm["p1"]), alive1, a1 == a) for a in ARMS1}
        p1 = {a: ConstantModel(1.0) for a in ARMS1}
    else:
        c1 = {a: binary(f"c1^{a}", fm["c1"], uncens1.astype(float), a1 == a) for a in ARMS1}
        p1 = {a: binary(f"p1^{a}", fm["p1"], np.nan_to_num(d.s1), uncens1 & (a1 == a)) for a in ARMS1}
    e2 = {a: binary(f"e2^{a}", fm["e2"], a2, reached & (a1 == a)) for a in ARMS1}
    c2, p2, mu2 = {}, {}, {}
    for arm in ARMS2:
        on_arm = reached & (a1 == arm[0]) & (a2 == arm[1])
        tag = f"{arm[0]}{arm[1]}"
        if death_as_censoring:
            c2[arm] = binary(f"c2^{tag}", _union(fm["c2"], fm["p2"]), alive2, on_arm)
            p2[arm] = ConstantModel(1.0)
        else:
            c2[arm] = binary(f"c2^{tag}", fm["c2"], (d.c2 == 0).astype(float), on_arm)
            p2[arm] = binary(f"p2^{tag}", fm["p2"], np.nan_to_num(d.s2), on_arm & (d.c2 == 0))
        model, msgs = _fit_mean(fm["mu2"], cov, d.y, on_arm & d.observed_y, f"mu2^{tag}", clip, spec.flag("mu2"))
        notes.extend(msgs)
        mu2[arm] = model
    suite = NuisanceSuite(e1, c1, p1, e2, c2, p2, mu2, {}, eps=eps, clip=clip)
    m_p2 = {}
    if death_as_censoring:
        m_p2 = {arm: ConstantModel(1.0) for arm in ARMS2}
    else:
        for arm in ARMS2 if all_m_p2 else ((0, 0),):
            stratum = reached & (a1 == arm[0])
            tag = f"{arm[0]}{arm[1]}"
            if not stratum.any():
                raise EmptyStratum(f"m_p2^{tag}: A1={arm[0]},C1=0,S1=1")
            sub = _rows(cov, stratum)
            sub["a1"] = np.full(int(stratum.sum()), float(arm[0]))
            target = np.full(d.n, np.nan)
            target[stratum] = suite.prob("p2", arm, sub)
            model, msgs = _fit_mean(fm["m_p2"], cov, target, stratum, f"m_p2^{tag}", None, spec.flag("m_p2"))
            notes.extend(msgs)
            m_p2[arm] = model
    suite = dataclasses.replace(suite, m_p2=m_p2, notes=tuple(notes))
    if policy is not None:
        suite = fit_policy_outcome(suite, d, policy, spec)
    return suite


def stage2_policy_outcome(suite: NuisanceSuite, cov, mask, a1_value, policy):
    """``mu2^{a1, pi2(x1, a1, x2)}(x1, x2)`` on ``mask`` rows (``NaN`` elsewhere)."""
    n = len(mask)
    sub = _rows(cov, mask)
    sub["a1"] = np.full(int(mask.sum()), float(a1_value))
    out = np.full(n, np.nan)
    if not mask.any():
        return out
    d2 = policy.decide_arrays(2, sub)
    vals = np.empty(int(mask.sum()))
    for a2 in (0, 1):
        sel = d2 == a2
        if sel.any():
            vals[sel] = suite.mean("mu2", (a1_value, a2), _rows(sub, sel))
    out[mask] = vals
    return out


def fit_policy_outcome(suite: NuisanceSuite, d: Dataset, policy, spec: ScenarioSpec | None = None,
                       target_fn=None) -> NuisanceSuite:
    """Backward-recursive stage-1 outcome regression for ``policy``.

    For each first-stage arm ``a`` the stage-2 fitted value
    ``mu2^{a, pi2}(x1, x2)`` (never the raw outcome) is regressed on ``x1``
    among rows with ``A1 = a, C1 = 0, S1 = 1``.  ``target_fn(cov, mask, a)``
    replaces the pseudo-outcome (used by the sensitivity analysis).
    """
    spec = spec or ScenarioSpec()
    fmap = spec.feature_map("m_mu2", d.p1, d.p2)
    cov = d.covariates()
    pi1 = policy.decide_arrays(1, cov)
    reached = d.reached2
    models = {}
    for a in ARMS1:
        stratum = reached & (d.a1 == a)
        if not stratum.any():
            if np.any(pi1 == a):
                raise EmptyStratum(f"m_mu2^{a}: A1={a},C1=0,S1=1")
            models[a] = None
            continue
        if target_fn is None:
            target = stage2_policy_outcome(suite, cov, stratum, a, policy)
        else:
            target = target_fn(cov, stratum, a)
        models[a], _ = _fit_mean(fmap, cov, target, stratum, f"m_mu2^{a}", suite.clip, spec.flag("m_mu2"))
    return suite.with_policy_models(models, policy)
