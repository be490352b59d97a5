"""A finite K-stage DGP with binary covariates, used as an exact oracle.

Covariates, treatments, censoring and survival are all binary.  Survival at
stage k depends only on ``x1`` and the number of treatments received so far,
with a non-negative treatment effect, so potential survival indicators coupled
through one uniform per stage are monotone and the always-survivor stratum is
well defined.  Every expectation is computed by exhaustive enumeration.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .general_k import StagedNuisance
from .trajectory import StagedData


@dataclass(frozen=True)
class DiscreteChainDGP:
    K: int = 2
    px1: float = 0.45
    e: tuple = (0.2, 0.8, -0.6)  # logit P(A_k=1): intercept, x_k, a_{k-1}
    c: tuple = (2.2, -0.6, 0.4)  # logit P(C_k=0): intercept, x_k, a_k
    p: tuple = (1.0, -1.2, 0.8)  # logit P(S_k=1): intercept, x1, number of treatments so far
    x: tuple = (-0.3, 1.1, 0.7)  # logit P(X_{k+1}=1): intercept, x_k, a_k
    y: tuple = (1.0, 0.5, 1.5)  # outcome mean: sum_k theta x_k + a_k (tau + kappa x_k)
    sd_y: float = 1.0

    def __post_init__(self):
        if self.p[2] < 0:
            raise ValueError("treatment must not lower survival (monotonicity)")

    # primitive conditionals ------------------------------------------------
    def prob_x1(self, x1):
        return np.where(np.asarray(x1) == 1, self.px1, 1.0 - self.px1)

    def prob_x_next(self, x_next, x_k, a_k):
        p1 = expit(self.x[0] + self.x[1] * np.asarray(x_k) + self.x[2] * np.asarray(a_k))
        return np.where(np.asarray(x_next) == 1, p1, 1.0 - p1)

    def e_treat(self, x_k, a_prev):
        return expit(self.e[0] + self.e[1] * np.asarray(x_k) + self.e[2] * np.asarray(a_prev))

    def c_stay(self, x_k, a_k):
        return expit(self.c[0] + self.c[1] * np.asarray(x_k) + self.c[2] * np.asarray(a_k))

    def p_survive(self, x1, n_treated):
        return expit(self.p[0] + self.p[1] * np.asarray(x1) + self.p[2] * np.asarray(n_treated))

    def y_mean(self, xs, arms):
        theta, tau, kappa = self.y
        return sum(theta * x + a * (tau + kappa * x) for x, a in zip(xs, arms))

    # simulation -------------------------------------------------------------
    def simulate(self, n, seed=0) -> StagedData:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), self.K, 0x70F]))
        K = self.K
        x = np.full((n, K), np.nan)
        a = np.full((n, K), np.nan)
        c = np.full((n, K), np.nan)
        s = np.full((n, K), np.nan)
        u = rng.random((n, 4 * K))
        z = rng.standard_normal(n)
        x1 = (u[:, 0] < self.px1).astype(float)
        alive = np.ones(n, bool)
        xk = x1
        a_prev = np.zeros(n)
        treated = np.zeros(n)
        x_hist, a_hist = [], []
        for k in range(K):
            if k > 0:
                xk = (u[:, 4 * k] < 1.0 - self.prob_x_next(0, x_hist[-1], a_hist[-1])).astype(float)
            ak = (u[:, 4 * k + 1] < self.e_treat(xk, a_prev)).astype(float)
            ck = (u[:, 4 * k + 2] >= self.c_stay(xk, ak)).astype(float)
            treated = treated + ak
            sk = (u[:, 4 * k + 3] < self.p_survive(x1, treated)).astype(float)
            x[alive, k] = xk[alive]
            a[alive, k] = ak[alive]
            c[alive, k] = ck[alive]
            uncens = alive & (ck == 0)
            s[uncens, k] = sk[uncens]
            alive = uncens & (sk == 1)
            x_hist.append(xk)
            a_hist.append(ak)
            a_prev = ak
        y = np.full(n, np.nan)
        y[alive] = self.y_mean([xh[alive] for xh in x_hist], [ah[alive] for ah in a_hist]) + self.sd_y * z[alive]
        return StagedData([x[:, [k]] for k in range(K)], a, c, s, y)

    # enumeration helpers ----------------------------------------------------
    def _paths(self, policy, x1):
        """All covariate paths under ``policy`` from ``x1``: list of (xs, arms, probability)."""
        out = []
        for tail in itertools.product((0, 1), repeat=self.K - 1):
            xs = (x1,) + tail
            arms = []
            prob = 1.0
            for k in range(self.K):
                cov = _history(xs[: k + 1], arms)
                arms.append(int(policy.decide_arrays(k + 1, cov)[0]))
                if k + 1 < self.K:
                    prob *= float(self.prob_x_next(xs[k + 1], xs[k], arms[k]))
            out.append((xs, tuple(arms), prob))
        return out

    def always_survivor_prob(self, x1):
        """``P(U = all survive | x1)`` from the coupled potential indicators.

        Survival under arm sequence ``abar`` needs ``u_k < p_k(x1, a_1 + ... + a_k)``
        for every k; the always-survivors satisfy this for every sequence.
        """
        total = 1.0
        for k in range(1, self.K + 1):
            worst = min(float(self.p_survive(x1, sum(arms))) for arms in itertools.product((0, 1), repeat=k))
            total *= worst
        return total

    def always_survivor_value(self, policy) -> float:
        """Mean of ``Y^pi`` among always-survivors by direct enumeration of strata.

        The covariate process is independent of the survival uniforms, so given
        ``x1`` the potential outcome mean is the same inside the stratum.
        """
        num = den = 0.0
        for x1 in (0, 1):
            w = float(self.prob_x1(x1)) * self.always_survivor_prob(x1)
            mean = sum(prob * self.y_mean(xs, arms) for xs, arms, prob in self._paths(policy, x1))
            num += w * mean
            den += w
        return num / den

    def identified_value(self, policy) -> float:
        """Weighted mean ``E[w(X1) QY_1(X1)] / E[w(X1)]`` with ``w = p_1^0 M_1`` built from
        observed-data conditionals by nested enumeration."""
        nuis = self.true_nuisance(policy)
        num = den = 0.0
        for x1 in (0, 1):
            cov = {"x1": np.array([float(x1)]), "x1_1": np.array([float(x1)])}
            w = nuis.p(1, np.array([0]), cov)[0] * nuis.m_s(1, cov)[0]
            q = nuis.q_y(1, policy.decide_arrays(1, cov), cov)[0]
            num += float(self.prob_x1(x1)) * w * q
            den += float(self.prob_x1(x1)) * w
        return num / den

    def true_nuisance(self, policy) -> "ToyTrueNuisance":
        return ToyTrueNuisance(self, policy)


def _history(xs, arms):
    cov = {}
    for j, xv in enumerate(xs, start=1):
        cov[f"x{j}"] = np.array([float(xv)])
        cov[f"x{j}_1"] = cov[f"x{j}"]
    for j, av in enumerate(arms[: len(xs) - 1], start=1):
        cov[f"a{j}"] = np.array([float(av)])
    return cov


class ToyTrueNuisance(StagedNuisance):
    """Exact nuisance functions of a :class:`DiscreteChainDGP` for a given policy."""

    def __init__(self, dgp: DiscreteChainDGP, policy):
        self.dgp = dgp
        self.policy = policy
        self.K = dgp.K

    @staticmethod
    def _hist(k, cov):
        n = len(cov["x1"])
        xs = [np.asarray(cov[f"x{j}"], dtype=float) for j in range(1, k + 1)]
        arms = [np.asarray(cov[f"a{j}"], dtype=float) for j in range(1, k)]
        return n, xs, arms

    def phi(self, k, arms, cov):
        n, xs, prev = self._hist(k, cov)
        arms = np.asarray(arms, dtype=float)
        a_prev = prev[-1] if prev else np.zeros(n)
        e1 = self.dgp.e_treat(xs[-1], a_prev)
        return np.where(arms == 1, e1, 1.0 - e1) * self.dgp.c_stay(xs[-1], arms)

    def p(self, k, arms, cov):
        n, xs, prev = self._hist(k, cov)
        treated = sum(prev, np.zeros(n)) + np.asarray(arms, dtype=float)
        return self.dgp.p_survive(xs[0], treated)

    @staticmethod
    def _by_unique(columns, fn):
        """Apply ``fn(row)`` once per distinct row of the stacked integer columns."""
        M = np.column_stack(columns).astype(int)
        keys, inv = np.unique(M, axis=0, return_inverse=True)
        vals = np.array([fn(tuple(int(v) for v in key)) for key in keys])
        return vals[inv.ravel()]

    def m_s(self, k, cov):
        n, xs, prev = self._hist(k, cov)
        return self._by_unique(xs + prev, lambda r: self._m_s_row(k, r[:k], r[k:]))

    def _m_s_row(self, k, xs, arms):
        if k == self.K:
            return 1.0
        arms = list(arms) + [0]
        total = 0.0
        for x_next in (0, 1):
            pr = float(self.dgp.prob_x_next(x_next, xs[-1], 0))
            p_next = float(self.dgp.p_survive(xs[0], sum(arms)))
            total += pr * p_next * self._m_s_row(k + 1, list(xs) + [x_next], arms)
        return total

    def q_y(self, k, arms, cov):
        n, xs, prev = self._hist(k, cov)
        arms = np.asarray(arms, dtype=float)
        return self._by_unique(xs + prev + [arms], lambda r: self._q_row(k, list(r[:k]), list(r[k:])))

    def _q_row(self, k, xs, arms):
        """``E[Y | h_k, a_k]`` continuing with the policy after stage k."""
        if k == self.K:
            return float(self.dgp.y_mean(xs, arms))
        total = 0.0
        for x_next in (0, 1):
            pr = float(self.dgp.prob_x_next(x_next, xs[-1], arms[-1]))
            nxt = list(xs) + [x_next]
            a_next = int(self.policy.decide_arrays(k + 1, _history(nxt, arms))[0])
            total += pr * self._q_row(k + 1, nxt, list(arms) + [a_next])
        return total
