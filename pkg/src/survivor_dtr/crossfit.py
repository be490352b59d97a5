"""J-fold cross-fitted multiply robust estimation.

Nuisances for fold j are fitted on the other folds; the fold estimate is the
usual ratio on fold j, and the reported value is the size-weighted average of
fold estimates.  Influence values are computed fold-wise with the out-of-fold
nuisances and pooled for the standard error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyStratum, NonpositiveDenominator
from .estimators import EstimateReport, _report, eif_terms, eif_values, eif_variance
from .nuisance import ScenarioSpec, fit_suite
from .trajectory import Dataset


@dataclass(frozen=True)
class FoldPlan:
    """Per-row fold labels in ``1..J``."""

    assignments: np.ndarray
    seed: int
    J: int

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=int)
        if self.J < 2:
            raise ValueError("cross-fitting needs J >= 2")
        if a.min(initial=1) < 1 or a.max(initial=1) > self.J:
            raise ValueError("fold labels must lie in 1..J")
        if len(np.unique(a)) != self.J:
            raise ValueError("every fold must be non-empty")
        object.__setattr__(self, "assignments", a)

    def folds(self):
        return [np.flatnonzero(self.assignments == j) for j in range(1, self.J + 1)]

    @classmethod
    def make(cls, n, J, seed=0, strata=None):
        """Seeded shuffle then contiguous blocks; with ``strata`` each stratum is spread evenly."""
        if not 2 <= J <= n:
            raise ValueError(f"need 2 <= J <= n (J={J}, n={n})")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(n), int(J)]))
        perm = rng.permutation(n)
        labels = np.empty(n, dtype=int)
        if strata is None:
            for j, block in enumerate(np.array_split(perm, J), start=1):
                labels[block] = j
        else:
            strata = np.asarray(strata)
            order = perm[np.argsort(strata[perm], kind="stable")]
            labels[order] = np.arange(n) % J + 1
        return cls(labels, int(seed), int(J))


def pattern_strata(d: Dataset) -> np.ndarray:
    """Integer code of the (c1, s1, c2, s2) pattern (absent entries coded separately)."""
    cols = [np.nan_to_num(getattr(d, f), nan=2).astype(int) for f in ("c1", "s1", "c2", "s2")]
    return cols[0] * 27 + cols[1] * 9 + cols[2] * 3 + cols[3]


def crossfit_v_mr(d: Dataset, policy, spec: ScenarioSpec | None = None, J=5, seed=0, *, stratified=False,
                  plan: FoldPlan | None = None, eps=0.01, clip=None, fit=None) -> EstimateReport:
    """Cross-fitted multiply robust estimate.

    Parameters
    ----------
    plan : FoldPlan, optional
        Overrides ``J``/``seed``/``stratified``.
    fit : callable, optional
        ``fit(train_dataset) -> NuisanceSuite`` replacing :func:`fit_suite`.

    Raises
    ------
    EmptyStratum
        With ``fold`` set to the 1-based fold whose complement lacks a stratum.
    """
    if plan is None:
        plan = FoldPlan.make(d.n, J, seed, pattern_strata(d) if stratified else None)
    if fit is None:
        def fit(train):
            return fit_suite(train, spec, policy, eps=eps, clip=clip)
    psi = np.empty(d.n)
    values, weights, mean_ds, notes = [], [], [], []
    for j, idx in enumerate(plan.folds(), start=1):
        train = d.subset(np.setdiff1d(np.arange(d.n), idx))
        test = d.subset(idx)
        try:
            suite = fit(train)
        except EmptyStratum as exc:
            raise EmptyStratum(exc.name, fold=j) from exc
        terms = eif_terms(test, policy, suite)
        mean_d = float(np.mean(terms.phi_d))
        if not mean_d > 1e-8:
            raise NonpositiveDenominator(mean_d)
        v_j = float(np.mean(terms.phi_n)) / mean_d
        psi[idx] = eif_values(terms.phi_n, terms.phi_d, v_j, mean_d)
        values.append(v_j)
        weights.append(len(idx) / d.n)
        mean_ds.append(mean_d)
        notes.extend(f"fold {j}: {m}" for m in suite.notes)
    value = float(np.dot(weights, values))
    se, upsilon = eif_variance(psi)
    return _report("mr_crossfit", value, se, d.n, float(np.dot(weights, mean_ds)), notes,
                   folds=plan.J, fold_values=values, upsilon=upsilon, mean_psi=float(np.mean(psi)))
