"""Multiply robust always-survivor value for K decision stages.

With prefix weights ``G_0 = 1``, ``G_k = G_{k-1} 1{A_k = C_k = 0} / phi_k^0`` and
``Wbar_k = prod_{j<=k} 1{A_j = pi_j}(1 - C_j) S_j / (phi_j^pi p_j^pi)``:

    phi_D = G_K Sbar_K + sum_k (G_{k-1} - G_k) QS_k
    phi_N = QY_1 phi_D + QS_1 sum_k Wbar_k (QY_{k+1} - QY_k),   QY_{K+1} = Y

where ``QS_k = Sbar_{k-1} p_k^0(h_k) M_k(h_k)`` with ``M_K = 1`` and
``M_k = E[p_{k+1}^0 M_{k+1} | h_k, A_k = C_k = 0, S_k = 1]``, and ``QY_k`` is
the backward regression of ``QY_{k+1}`` at the policy's arm.  For ``K = 2``
these are exactly the two-stage terms.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyStratum
from .estimators import EstimateReport, mr_from_terms
from .nuisance import NuisanceSuite, _trim, fit_logistic, fit_mean
from .trajectory import StagedData


class StagedNuisance:
    """Stage-indexed nuisance interface.

    Every method takes per-row arm arrays and a covariate mapping restricted to
    the rows being evaluated (history up to stage ``k``, with earlier arms).
    """

    K: int
    policy = None

    def phi(self, k, arms, cov):
        """``P(A_k = arm | h_k) P(C_k = 0 | h_k, arm)``."""
        raise NotImplementedError

    def p(self, k, arms, cov):
        raise NotImplementedError

    def m_s(self, k, cov):
        """Nested survival regression ``M_k(h_k)`` (all later arms zero)."""
        raise NotImplementedError

    def q_y(self, k, arms, cov):
        """Outcome regression ``QY_k`` for the given stage-k arms."""
        raise NotImplementedError


class TwoStageAdapter(StagedNuisance):
    """Expose a fitted two-stage :class:`NuisanceSuite` through the staged interface."""

    K = 2

    def __init__(self, suite: NuisanceSuite):
        self.suite = suite
        self.policy = suite.policy

    def _arms(self, k, arms, cov):
        arms = np.asarray(arms, dtype=int)
        if k == 1:
            return arms
        return np.column_stack([np.asarray(cov["a1"]).astype(int), arms])

    def _all(self, arms):
        return np.ones(len(arms), bool)

    def phi(self, k, arms, cov):
        return self.suite.by_arm(f"phi{k}", self._arms(k, arms, cov), cov, self._all(arms))

    def p(self, k, arms, cov):
        return self.suite.by_arm(f"p{k}", self._arms(k, arms, cov), cov, self._all(arms))

    def m_s(self, k, cov):
        n = len(next(iter(cov.values())))
        if k == 2:
            return np.ones(n)
        return self.suite.by_arm("m_p2", np.zeros((n, 2), int), cov, np.ones(n, bool))

    def q_y(self, k, arms, cov):
        which = "m_mu2" if k == 1 else "mu2"
        return self.suite.by_arm(which, self._arms(k, arms, cov), cov, self._all(arms))


def _sub(cov, mask):
    return {k: v[mask] for k, v in cov.items()}


def staged_terms(sd: StagedData, policy, nuis: StagedNuisance):
    """Per-row ``(phi_n, phi_d, QS_1)`` for K-stage data."""
    n, K = sd.n, sd.K
    a = np.nan_to_num(sd.a, nan=-1).astype(int)
    c, s = sd.c, sd.s
    covs = [sd.covariates(k) for k in range(1, K + 1)]

    phi_d = np.zeros(n)
    g_prev = np.ones(n)
    q_s1 = None
    for k in range(1, K + 1):
        reached = sd.reached(k)
        cov = covs[k - 1]
        q_s = np.zeros(n)
        if reached.any():
            sub = _sub(cov, reached)
            zeros = np.zeros(int(reached.sum()), int)
            q_s[reached] = nuis.p(k, zeros, sub) * nuis.m_s(k, sub)
        if k == 1:
            q_s1 = q_s.copy()
        gate = reached & (a[:, k - 1] == 0) & (c[:, k - 1] == 0)
        g_k = np.zeros(n)
        if gate.any():
            g_k[gate] = g_prev[gate] / nuis.phi(k, np.zeros(int(gate.sum()), int), _sub(cov, gate))
        phi_d += (g_prev - g_k) * q_s
        g_prev = g_k
    done = sd.reached(K + 1)
    phi_d += np.where(done, g_prev, 0.0)

    # numerator: forward pass along the policy
    cov = covs[0]
    pi = policy.decide_arrays(1, cov)
    q_y1 = nuis.q_y(1, pi, cov)
    prev = q_y1.copy()
    wbar = np.ones(n)
    alive = np.ones(n, bool)
    aug = np.zeros(n)
    for k in range(1, K + 1):
        cov = covs[k - 1]
        alive = alive & (a[:, k - 1] == pi) & (c[:, k - 1] == 0) & (s[:, k - 1] == 1)
        if not alive.any():
            break
        sub = _sub(cov, alive)
        arms = a[alive, k - 1]
        wbar = np.where(alive, wbar, 0.0)
        wbar[alive] = wbar[alive] / (nuis.phi(k, arms, sub) * nuis.p(k, arms, sub))
        nxt = np.full(n, np.nan)
        pi_next = np.full(n, -1)
        if k == K:
            nxt[alive] = sd.y[alive]
        else:
            sub_next = _sub(covs[k], alive)
            pi_next[alive] = policy.decide_arrays(k + 1, sub_next)
            nxt[alive] = nuis.q_y(k + 1, pi_next[alive], sub_next)
        aug[alive] += wbar[alive] * (nxt[alive] - prev[alive])
        prev = nxt
        pi = pi_next
    phi_n = q_y1 * phi_d + aug * q_s1
    return phi_n, phi_d, q_s1


def v_mr_general_k(sd: StagedData, policy, nuis: StagedNuisance) -> EstimateReport:
    """Multiply robust estimate for K-stage data (``mean(phi_N) / mean(phi_D)``)."""
    if isinstance(nuis, NuisanceSuite):
        nuis = TwoStageAdapter(nuis)
    phi_n, phi_d, _ = staged_terms(sd, policy, nuis)
    report, _ = mr_from_terms(phi_n, phi_d, "mr_k")
    report.diagnostics["K"] = sd.K
    return report


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def history_names(k, cov):
    """Covariate names of ``h_k``: ``xj_i`` for j <= k and ``aj`` for j < k."""
    names = []
    for j in range(1, k + 1):
        names += sorted((n for n in cov if n.startswith(f"x{j}_")), key=lambda n: int(n.split("_")[1]))
        if j < k:
            names.append(f"a{j}")
    return names


@dataclass
class CellModel:
    """Cell means over the distinct values of a discrete history (saturated model)."""

    keys: np.ndarray
    means: np.ndarray
    fallback: float

    @classmethod
    def fit(cls, H, y):
        keys, inv = np.unique(H, axis=0, return_inverse=True)
        inv = inv.ravel()
        means = np.bincount(inv, weights=y, minlength=len(keys)) / np.bincount(inv, minlength=len(keys))
        return cls(keys, means, float(np.mean(y)))

    def predict_design(self, H):
        out = np.full(len(H), self.fallback)
        if len(H) == 0:
            return out
        both = np.vstack([self.keys, H])
        _, inv = np.unique(both, axis=0, return_inverse=True)
        inv = inv.ravel()
        lookup = np.full(inv.max() + 1, -1)
        lookup[inv[: len(self.keys)]] = np.arange(len(self.keys))
        hit = lookup[inv[len(self.keys):]]
        out[hit >= 0] = self.means[hit[hit >= 0]]
        return out


@dataclass
class _StageModel:
    k: int
    kind: str
    model: object
    names: list
    binary: bool

    def design(self, cov):
        H = np.column_stack([np.asarray(cov[n], dtype=float) for n in self.names]) if self.names else \
            np.empty((len(next(iter(cov.values()))), 0))
        if self.kind == "linear":
            H = np.column_stack([np.ones(len(H)), H])
        return H

    def predict(self, cov):
        H = self.design(cov)
        if self.kind == "saturated":
            return self.model.predict_design(H)
        return self.model.predict_features(H)


@dataclass
class FittedStagedNuisance(StagedNuisance):
    """Stage models fitted per arm by logistic/least squares or saturated cell means."""

    K: int
    e_models: dict
    c_models: dict
    p_models: dict
    m_s_models: dict
    q_models: dict
    policy: object = None
    eps: float = 0.01
    notes: list = field(default_factory=list)

    def _per_arm(self, table, k, arms, cov, prob):
        arms = np.asarray(arms, dtype=int)
        out = np.full(len(arms), np.nan)
        for arm in (0, 1):
            sel = arms == arm
            if sel.any():
                val = table[(k, arm)].predict(_sub(cov, sel))
                out[sel] = _trim(val, self.eps) if prob else val
        return out

    def phi(self, k, arms, cov):
        p_treat = _trim(self.e_models[k].predict(cov), self.eps)
        arms = np.asarray(arms, dtype=int)
        e = np.where(arms == 1, p_treat, 1.0 - p_treat)
        return _trim(e, self.eps) * self._per_arm(self.c_models, k, arms, cov, True)

    def p(self, k, arms, cov):
        return self._per_arm(self.p_models, k, arms, cov, True)

    def m_s(self, k, cov):
        if k == self.K:
            return np.ones(len(next(iter(cov.values()))))
        return self.m_s_models[k].predict(cov)

    def q_y(self, k, arms, cov):
        return self._per_arm(self.q_models, k, arms, cov, False)


def _fit_model(kind, k, names, cov, target, mask, binary, label):
    if not mask.any():
        raise EmptyStratum(label)
    stub = _StageModel(k, kind, None, names, binary)
    H = stub.design(_sub(cov, mask))
    y = target[mask]
    if kind == "saturated":
        stub.model = CellModel.fit(H, y)
    elif binary:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            stub.model = fit_logistic(H, y)
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            stub.model = fit_mean(H, y)
    return stub


def fit_staged_suite(sd: StagedData, policy, learner="linear", eps=0.01) -> FittedStagedNuisance:
    """Fit every K-stage nuisance, including the policy-specific backward outcome regressions.

    ``learner`` is ``"linear"`` (main effects of the history) or
    ``"saturated"`` (cell means; consistent for discrete histories).
    """
    K = sd.K
    a = np.nan_to_num(sd.a, nan=-1)
    c = np.nan_to_num(sd.c, nan=-1)
    s = np.nan_to_num(sd.s, nan=-1)
    covs = [sd.covariates(k) for k in range(1, K + 1)]
    names = [history_names(k, covs[k - 1]) for k in range(1, K + 1)]
    e, cm, pm = {}, {}, {}
    for k in range(1, K + 1):
        cov = covs[k - 1]
        reached = sd.reached(k)
        e[k] = _fit_model(learner, k, names[k - 1], cov, a[:, k - 1], reached, True, f"e{k}")
        for arm in (0, 1):
            on = reached & (a[:, k - 1] == arm)
            cm[(k, arm)] = _fit_model(learner, k, names[k - 1], cov, (c[:, k - 1] == 0).astype(float), on, True,
                                      f"c{k}^{arm}")
            pm[(k, arm)] = _fit_model(learner, k, names[k - 1], cov, s[:, k - 1], on & (c[:, k - 1] == 0), True,
                                      f"p{k}^{arm}")
    nuis = FittedStagedNuisance(K, e, cm, pm, {}, {}, policy, eps)

    # nested survival regressions, all arms zero
    for k in range(K - 1, 0, -1):
        stratum = sd.reached(k + 1) & (a[:, k - 1] == 0)
        target = np.full(sd.n, np.nan)
        if stratum.any():
            sub = _sub(covs[k], stratum)
            target[stratum] = nuis.p(k + 1, np.zeros(int(stratum.sum()), int), sub) * nuis.m_s(k + 1, sub)
        nuis.m_s_models[k] = _fit_model(learner, k, names[k - 1], covs[k - 1], target, stratum, False, f"M{k}")

    # backward outcome regressions along the policy
    done = sd.reached(K + 1)
    for arm in (0, 1):
        nuis.q_models[(K, arm)] = _fit_model(learner, K, names[K - 1], covs[K - 1], sd.y, done & (a[:, K - 1] == arm),
                                             False, f"QY{K}^{arm}")
    for k in range(K - 1, 0, -1):
        nxt = sd.reached(k + 1)
        target = np.full(sd.n, np.nan)
        if nxt.any():
            sub = _sub(covs[k], nxt)
            target[nxt] = nuis.q_y(k + 1, policy.decide_arrays(k + 1, sub), sub)
        for arm in (0, 1):
            stratum = nxt & (a[:, k - 1] == arm)
            nuis.q_models[(k, arm)] = _fit_model(learner, k, names[k - 1], covs[k - 1], target, stratum, False,
                                                 f"QY{k}^{arm}")
    return nuis
