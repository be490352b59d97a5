"""Linear threshold policies, differential evolution and always-survivor policy learning.

A stage-k policy treats when ``h_k . beta_k > 0`` where ``h_k`` is the history
vector with a leading 1.  The learning objective caches every policy-free
quantity once per dataset so that a candidate only costs a stage-1 outcome
regression refit and a pass over the numerator terms; candidates of a whole
DE generation are evaluated as one matrix computation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ArmNotFitted, DimensionMismatch, NonpositiveDenominator
from .estimators import EstimateReport, eif_terms, v_aipw, v_mr
from .nuisance import ARMS1, MEAN_LEARNERS, NuisanceSuite, ScenarioSpec, fit_policy_outcome, fit_suite

DEFAULT_FEATURES_2 = ("x1", "a1", "x2")


def default_features(stage: int) -> tuple:
    """``(x1, a1, x2, a2, ..., xk)`` for stage ``k``."""
    names = []
    for j in range(1, stage + 1):
        names.append(f"x{j}")
        if j < stage:
            names.append(f"a{j}")
    return tuple(names)


def _expand(name, cov):
    if name in cov:
        return [np.asarray(cov[name], dtype=float)]
    keys = sorted((k for k in cov if k.startswith(name + "_")), key=lambda k: int(k.rsplit("_", 1)[1]))
    if not keys:
        raise DimensionMismatch(f"history has no column for feature '{name}'")
    return [np.asarray(cov[k], dtype=float) for k in keys]


def _unit(beta):
    beta = np.asarray(beta, dtype=float)
    norm = np.linalg.norm(beta)
    return beta / norm if norm > 0 else beta


@dataclass(frozen=True)
class LinearPolicy:
    """Per-stage linear threshold rules ``pi_k = 1{h_k . beta_k > 0}``.

    ``betas[k-1]`` has the intercept first; ``features[k-1]`` names the
    covariates of ``h_k`` in order (a multivariate name such as ``x1`` expands
    to ``x1_1, x1_2, ...`` when present).  Stage vectors are stored with unit
    norm.
    """

    betas: tuple
    features: tuple = None

    def __post_init__(self):
        betas = tuple(tuple(float(v) for v in _unit(b)) for b in self.betas)
        object.__setattr__(self, "betas", betas)
        feats = self.features
        if feats is None:
            feats = tuple(default_features(k + 1) for k in range(len(betas)))
        feats = tuple(tuple(f) for f in feats)
        if len(feats) != len(betas):
            raise DimensionMismatch("one feature list per stage is required")
        object.__setattr__(self, "features", feats)

    @classmethod
    def two_stage(cls, beta1, beta2, feature_map_2=DEFAULT_FEATURES_2):
        return cls((beta1, beta2), (("x1",), tuple(feature_map_2)))

    @property
    def K(self):
        return len(self.betas)

    @property
    def beta1(self):
        return np.array(self.betas[0])

    @property
    def beta2(self):
        return np.array(self.betas[1])

    def history(self, stage, cov: Mapping[str, np.ndarray]) -> np.ndarray:
        """Design ``[1, h_k]`` (rows = subjects) for ``stage``."""
        cols = [c for name in self.features[stage - 1] for c in _expand(name, cov)]
        n = len(next(iter(cov.values())))
        H = np.column_stack([np.ones(n)] + cols)
        if H.shape[1] != len(self.betas[stage - 1]):
            raise DimensionMismatch(
                f"stage {stage} history has {H.shape[1] - 1} features, coefficients expect "
                f"{len(self.betas[stage - 1]) - 1}")
        return H

    def decide_arrays(self, stage, cov) -> np.ndarray:
        return (self.history(stage, cov) @ np.array(self.betas[stage - 1]) > 0).astype(int)

    def decide(self, stage, history) -> int:
        """Decision for one subject.

        ``history`` is a mapping of covariate names to scalars/vectors or a
        plain vector already ordered as the stage's features (no intercept).
        """
        beta = np.array(self.betas[stage - 1])
        if isinstance(history, Mapping):
            cov = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in history.items()}
            if any(v.size > 1 for v in cov.values()):
                flat = {}
                for k, v in cov.items():
                    if v.size == 1:
                        flat[k] = v
                    else:
                        flat.update({f"{k}_{j + 1}": v[j:j + 1] for j in range(v.size)})
                cov = flat
            return int(self.decide_arrays(stage, cov)[0])
        h = np.atleast_1d(np.asarray(history, dtype=float))
        if h.size + 1 != beta.size:
            raise DimensionMismatch(f"stage {stage} expects {beta.size - 1} features, got {h.size}")
        return int(beta[0] + h @ beta[1:] > 0)

    # persistence ---------------------------------------------------------
    def to_dict(self):
        out = {}
        for k, (b, f) in enumerate(zip(self.betas, self.features), start=1):
            out[f"beta{k}"] = list(b)
            if k > 1:
                out[f"feature_map_{k}"] = ",".join(f)
        return out

    @classmethod
    def from_dict(cls, obj):
        betas, feats = [], []
        k = 1
        while f"beta{k}" in obj:
            betas.append(obj[f"beta{k}"])
            fm = obj.get(f"feature_map_{k}")
            if fm is None:
                feats.append(default_features(k) if k > 1 else ("x1",))
            else:
                feats.append(tuple(s.strip() for s in (fm.split(",") if isinstance(fm, str) else fm)))
            k += 1
        if not betas:
            raise ValueError("policy needs at least 'beta1'")
        return cls(tuple(betas), tuple(feats))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_vector(self, theta):
        """Same feature maps, coefficients taken from the concatenated ``theta``."""
        out, i = [], 0
        for b in self.betas:
            out.append(theta[i:i + len(b)])
            i += len(b)
        return LinearPolicy(tuple(out), self.features)


def constant_policy(template: LinearPolicy, treat: int) -> LinearPolicy:
    """Policy with the same shape as ``template`` that always (or never) treats."""
    betas = []
    for b in template.betas:
        v = np.zeros(len(b))
        v[0] = 1.0 if treat else -1.0
        betas.append(v)
    return LinearPolicy(tuple(betas), template.features)


# --------------------------------------------------------------------------
# differential evolution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DEConfig:
    pop_factor: int = 15
    F: float = 0.8
    CR: float = 0.9
    max_gen: int = 200
    stall_gen: int = 30
    seed: int = 0
    tol: float = 1e-12

    def validate(self):
        if self.pop_factor < 1 or not 0 <= self.CR <= 1 or self.F <= 0 or self.max_gen < 0 or self.stall_gen < 1:
            raise ValueError(f"invalid differential evolution settings: {self}")
        return self


@dataclass
class DEResult:
    x: np.ndarray
    value: float
    trace: list
    evaluations: int
    initial_best: float
    stalled: bool
    population: np.ndarray = None
    scores: np.ndarray = None


def project_blocks(X, sizes):
    """Normalize each stage block of every row of ``X`` to unit length."""
    X = np.array(X, dtype=float, copy=True)
    i = 0
    for s in sizes:
        block = X[:, i:i + s]
        norm = np.linalg.norm(block, axis=1, keepdims=True)
        np.divide(block, norm, out=block, where=norm > 0)
        i += s
    return X


def differential_evolution(objective, sizes: Sequence[int], config: DEConfig = DEConfig(), init=None) -> DEResult:
    """Maximize ``objective`` (batch: (P, dim) -> (P,)) with rand/1/bin DE.

    Every candidate is projected onto the product of per-stage unit spheres
    before evaluation.  ``init`` rows (already on the sphere or not) seed the
    start of the population.  Stops after ``max_gen`` generations or
    ``stall_gen`` generations without improvement of the best value.
    """
    config.validate()
    dim = int(sum(sizes))
    P = max(4, config.pop_factor * dim)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, dim]))
    pop = rng.uniform(-1.0, 1.0, size=(P, dim))
    if init is not None:
        init = np.atleast_2d(np.asarray(init, dtype=float))[:P]
        pop[: len(init)] = init
    pop = project_blocks(pop, sizes)
    scores = np.asarray(objective(pop), dtype=float)
    evaluations = P
    best = int(np.argmax(scores))
    initial_best = float(scores[best])
    trace = [initial_best]
    stall = 0
    stalled = False
    idx = np.arange(P)
    for _ in range(config.max_gen):
        # three distinct donors per member, all different from the member
        r = np.empty((P, 3), dtype=int)
        for i in range(P):
            r[i] = rng.choice(np.delete(idx, i), 3, replace=False)
        mutant = pop[r[:, 0]] + config.F * (pop[r[:, 1]] - pop[r[:, 2]])
        cross = rng.random((P, dim)) < config.CR
        cross[idx, rng.integers(0, dim, P)] = True
        trial = project_blocks(np.where(cross, mutant, pop), sizes)
        trial_scores = np.asarray(objective(trial), dtype=float)
        evaluations += P
        better = trial_scores >= scores
        pop[better] = trial[better]
        scores[better] = trial_scores[better]
        new_best = int(np.argmax(scores))
        if scores[new_best] > trace[-1] + config.tol:
            stall = 0
        else:
            stall += 1
        best = new_best
        trace.append(float(scores[best]))
        if stall >= config.stall_gen:
            stalled = True
            break
    return DEResult(pop[best].copy(), float(scores[best]), trace, evaluations, initial_best, stalled, pop, scores)


# --------------------------------------------------------------------------
# cached value objective
# --------------------------------------------------------------------------

class ValueObjective:
    """Batch evaluation of the MR (or AIPW) value over many linear policies.

    All policy-free pieces are computed once: the denominator terms, the
    stage-wise inverse weights at the observed arms, both stage-2 outcome
    predictions at the observed first-stage arm, and, per first-stage arm, the
    least squares projector of the stage-1 outcome regression.  Candidate
    evaluation is then a handful of dense matrix products.

    For the AIPW objective the denominator and principal-score terms are 1 and
    the weights come from the death-as-censoring suite.
    """

    def __init__(self, d, suite: NuisanceSuite, template: LinearPolicy, spec: ScenarioSpec | None = None,
                 kind="mr"):
        spec = spec or ScenarioSpec()
        if spec.flag("m_mu2") in MEAN_LEARNERS:
            raise ValueError("cached objective needs a least squares stage-1 outcome regression")
        self.d, self.suite, self.template, self.spec, self.kind = d, suite, template, spec, kind
        n = d.n
        cov = d.covariates()
        self.n = n
        reached = d.reached2
        self.reached = reached
        a1 = d.a1.astype(int)
        a2 = np.nan_to_num(d.a2, nan=-1).astype(int)
        self.a1, self.a2 = a1, a2
        probe = template
        if kind == "mr":
            terms = eif_terms(d, probe, fit_policy_outcome(suite, d, probe, spec))
            self.phi_d = terms.phi_d
            self.q_s1 = terms.q_s[:, 0]
        elif kind == "aipw":
            self.phi_d = np.ones(n)
            self.q_s1 = np.ones(n)
        else:
            raise ValueError(f"unknown objective {kind!r}")
        self.mean_d = float(np.mean(self.phi_d))
        if not self.mean_d > 1e-8:
            raise NonpositiveDenominator(self.mean_d)
        alive1 = (d.c1 == 0) & (d.s1 == 1)
        self.base1 = np.zeros(n)
        self.base1[alive1] = 1.0 / (suite.by_arm("phi1", a1, cov, alive1)[alive1]
                                    * suite.by_arm("p1", a1, cov, alive1)[alive1])
        alive2 = reached & (d.c2 == 0) & (d.s2 == 1)
        arms = np.column_stack([a1, a2])
        self.base2 = np.zeros(n)
        self.base2[alive2] = 1.0 / (suite.by_arm("phi2", arms, cov, alive2)[alive2]
                                    * suite.by_arm("p2", arms, cov, alive2)[alive2])
        self.y = np.nan_to_num(d.y)
        sub = {k: v[reached] for k, v in cov.items()}
        self.mu_own = np.stack([
            suite.by_arm("mu2", np.column_stack([a1[reached], np.full(reached.sum(), b)]), sub,
                         np.ones(reached.sum(), bool))
            for b in (0, 1)], axis=1)
        self.cov = cov
        self.cov_r = sub
        fmap = spec.feature_map("m_mu2", d.p1, d.p2)
        self.proj = {}
        a1_r = a1[reached]
        for a in ARMS1:
            stratum = a1_r == a
            if not stratum.any():
                self.proj[a] = None
                continue
            strat_cov = {k: v[stratum] for k, v in sub.items()}
            bound = fmap.bind(strat_cov)
            B = bound(strat_cov)
            E = bound(cov)
            self.proj[a] = (stratum, E, np.linalg.pinv(B))
        self.clip = suite.clip

    def _decisions(self, stage, cov, betas):
        H = self.template.history(stage, cov)
        return (H @ betas.T > 0)

    def values(self, theta) -> np.ndarray:
        """Objective values for the rows of ``theta`` (concatenated stage vectors)."""
        theta = np.atleast_2d(theta)
        s1 = len(self.template.betas[0])
        D1 = self._decisions(1, self.cov, theta[:, :s1])
        D2 = self._decisions(2, self.cov_r, theta[:, s1:])
        mu_pi = np.where(D2, self.mu_own[:, 1:2], self.mu_own[:, 0:1])
        q_y1 = np.zeros((self.n, theta.shape[0]))
        for a in ARMS1:
            if self.proj[a] is None:
                if np.any(D1 == a):
                    raise ArmNotFitted("m_mu2", (a,))
                continue
            stratum, E, pinv = self.proj[a]
            fitted = E @ (pinv @ mu_pi[stratum])
            if self.clip is not None:
                fitted = np.clip(fitted, -self.clip, self.clip)
            q_y1 = np.where(D1 == a, fitted, q_y1)
        r = self.reached
        w1 = self.base1[r, None] * (self.a1[r, None] == D1[r])
        w2 = self.base2[r, None] * (self.a2[r, None] == D2)
        aug = w1 * (mu_pi - q_y1[r]) + w1 * w2 * (self.y[r, None] - mu_pi)
        num = (q_y1 * self.phi_d[:, None]).sum(axis=0) + (aug * self.q_s1[r, None]).sum(axis=0)
        return num / self.n / self.mean_d

    def __call__(self, theta):
        return self.values(theta)


# --------------------------------------------------------------------------
# learning
# --------------------------------------------------------------------------

@dataclass
class LearnResult:
    policy: LinearPolicy
    value_report: EstimateReport
    optimizer_trace: list
    evaluations: int
    initial_best: float = float("nan")
    objective: str = "mr"
    stalled: bool = False
    diagnostics: dict = field(default_factory=dict)


def learn(d, spec: ScenarioSpec | None = None, objective="mr", de_config: DEConfig = DEConfig(),
          feature_map_2=DEFAULT_FEATURES_2, suite: NuisanceSuite | None = None, eps=0.01, clip=None,
          init=None) -> LearnResult:
    """Search linear two-stage policies maximizing the estimated always-survivor value.

    Policy-free nuisances are fitted once (``suite`` may be passed in); each
    candidate only refits the stage-1 outcome regression.  The returned report
    is the full estimator run at the winning policy.
    """
    spec = spec or ScenarioSpec()
    if suite is None:
        suite = fit_suite(d, spec, eps=eps, clip=clip, death_as_censoring=(objective == "aipw"))
    template = LinearPolicy.two_stage(np.r_[1.0, np.zeros(d.p1)], np.r_[1.0, np.zeros(_width(d, feature_map_2))],
                                      feature_map_2)
    obj = ValueObjective(d, suite, template, spec, kind=objective)
    sizes = [len(b) for b in template.betas]
    res = differential_evolution(obj, sizes, de_config, init=init)
    policy = template.with_vector(res.x)
    fitted = fit_policy_outcome(suite, d, policy, spec)
    report = v_mr(d, policy, fitted) if objective == "mr" else v_aipw(d, policy, fitted)
    return LearnResult(policy, report, res.trace, res.evaluations, res.initial_best, objective, res.stalled,
                       {"objective_value": res.value})


def _width(d, features):
    cov = d.covariates()
    n_reached = int(d.reached2.sum())
    if n_reached == 0:
        sample = {k: v[:1] for k, v in cov.items()}
        sample.setdefault("x2", np.zeros(1))
    else:
        sample = {k: v[d.reached2][:1] for k, v in cov.items()}
    return sum(len(_expand(f, sample)) for f in features)


# --------------------------------------------------------------------------
# ground-truth policy quality (simulation only)
# --------------------------------------------------------------------------

def pcd_as(policy_hat: LinearPolicy, policy_star: LinearPolicy, dgp, m=100_000, seed=0, inner=10) -> float:
    """Always-survivor-weighted share of agreeing decisions (PCD-AS).

    ``h(x1) = 1{pi1_hat = pi1_star} P(pi2_hat = pi2_star | x1, a1 = pi1_star(x1))``
    with the stage-2 probability estimated from ``inner`` draws of ``X2``; the
    weights are the true ``p1^0 m_p2^00(x1)``.
    """
    from .simulation import TrueModels

    truth = TrueModels(dgp)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CD]))
    x1 = truth.draw_x1(rng, m)
    w = truth.principal_weight(x1)
    cov1 = {"x1": x1}
    star1 = policy_star.decide_arrays(1, cov1)
    agree1 = policy_hat.decide_arrays(1, cov1) == star1
    agree2 = np.zeros(m)
    for _ in range(inner):
        x2 = truth.draw_x2(rng, x1, star1)
        cov2 = {"x1": x1, "a1": star1.astype(float), "x2": x2}
        agree2 += policy_hat.decide_arrays(2, cov2) == policy_star.decide_arrays(2, cov2)
    h = agree1 * agree2 / inner
    return float(np.sum(w * h) / np.sum(w))


class TrueValueObjective:
    """Plug-in value with true models over a fixed set of draws (common random numbers)."""

    def __init__(self, dgp, template: LinearPolicy, m=100_000, seed=0, inner=1):
        from .simulation import TrueModels

        truth = TrueModels(dgp)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B7]))
        self.template = template
        x1 = truth.draw_x1(rng, m)
        self.w = truth.principal_weight(x1)
        self.wsum = float(self.w.sum())
        self.cov1 = {"x1": x1}
        self.branches = []
        for a1 in (0, 1):
            draws = []
            for _ in range(inner):
                x2 = truth.draw_x2(rng, x1, np.full(m, a1))
                cov2 = {"x1": x1, "a1": np.full(m, float(a1)), "x2": x2}
                mu = [truth.mu2(a1, a2, x1, x2) for a2 in (0, 1)]
                draws.append((template.history(2, cov2), mu[0], mu[1]))
            self.branches.append(draws)
        self.H1 = template.history(1, self.cov1)
        self.inner = inner

    def values(self, theta, chunk=16):
        theta = np.atleast_2d(theta)
        s1 = len(self.template.betas[0])
        out = np.empty(theta.shape[0])
        for start in range(0, theta.shape[0], chunk):
            th = theta[start:start + chunk]
            D1 = self.H1 @ th[:, :s1].T > 0
            total = np.zeros(D1.shape)
            for a1 in (0, 1):
                acc = np.zeros(D1.shape)
                for H2, mu0, mu1 in self.branches[a1]:
                    D2 = H2 @ th[:, s1:].T > 0
                    acc += np.where(D2, mu1[:, None], mu0[:, None])
                total += np.where(D1 == a1, acc / self.inner, 0.0)
            out[start:start + chunk] = self.w @ total / self.wsum
        return out

    def __call__(self, theta):
        return self.values(theta)


def true_optimal_policy(dgp, m=100_000, de_config: DEConfig = DEConfig(), seed=0,
                        feature_map_2=DEFAULT_FEATURES_2, return_value=False):
    """Maximize the true-model plug-in value over unit-sphere linear policies (defines beta*)."""
    template = LinearPolicy.two_stage(np.r_[1.0, 0.0], np.r_[1.0, np.zeros(len(feature_map_2))], feature_map_2)
    obj = TrueValueObjective(dgp, template, m=m, seed=seed)
    sizes = [len(b) for b in template.betas]
    res = differential_evolution(obj, sizes, de_config)
    policy = template.with_vector(res.x)
    return (policy, res.value) if return_value else policy


def policy_agreement(a: LinearPolicy, b: LinearPolicy, grid1, grid2) -> float:
    """Share of grid points where both stages decide identically."""
    cov1 = {"x1": np.asarray(grid1, float)}
    same1 = a.decide_arrays(1, cov1) == b.decide_arrays(1, cov1)
    g = np.asarray(grid2, float)
    cov2 = {"x1": g[:, 0], "a1": g[:, 1], "x2": g[:, 2]}
    same2 = a.decide_arrays(2, cov2) == b.decide_arrays(2, cov2)
    return float((same1.sum() + same2.sum()) / (same1.size + same2.size))


def policy_norms_ok(policy: LinearPolicy, tol=1e-12) -> bool:
    return all(abs(math.hypot(*b) - 1.0) <= tol or not any(b) for b in policy.betas)
