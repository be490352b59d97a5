"""Declarative feature maps over named covariate columns.

A term is ``"1"`` (intercept), a product of factors joined by ``*`` where a
factor is ``name``, ``name^k`` or ``exp(name)``, or a natural cubic spline
``ns(name)`` which expands to several columns.  Spline knots are taken from
the data the first time the map is bound (:meth:`FeatureMap.bind`).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

SPLINE_QUANTILES = np.linspace(0.1, 0.9, 9)

_POWER = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\^(\d+)$")
_EXP = re.compile(r"^exp\(([A-Za-z_][A-Za-z0-9_]*)\)$")
_SPLINE = re.compile(r"^ns\(([A-Za-z_][A-Za-z0-9_]*)\)$")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def natural_spline_basis(x, knots):
    """Natural cubic spline basis without intercept (linear term first).

    Uses the truncated-power construction: columns ``x`` and
    ``d_k - d_{K-1}`` for ``k = 1..K-2`` with
    ``d_k = ((x - t_k)_+^3 - (x - t_K)_+^3) / (t_K - t_k)``.
    The fit is linear beyond the boundary knots.
    """
    x = np.asarray(x, dtype=float)
    knots = np.asarray(knots, dtype=float)
    if knots.size < 3:
        return x[:, None]
    tk = knots[-1]

    def d(k):
        return (np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - tk, 0.0) ** 3) / (tk - knots[k])

    last = d(knots.size - 2)
    cols = [x] + [d(k) - last for k in range(knots.size - 2)]
    return np.column_stack(cols)


def _factor(token, cov):
    m = _POWER.match(token)
    if m:
        return np.asarray(cov[m.group(1)], dtype=float) ** int(m.group(2))
    m = _EXP.match(token)
    if m:
        return np.exp(np.asarray(cov[m.group(1)], dtype=float))
    if _NAME.match(token):
        return np.asarray(cov[token], dtype=float)
    raise ValueError(f"unrecognized feature factor {token!r}")


@dataclass(frozen=True)
class FeatureMap:
    terms: tuple
    knots: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(t.replace(" ", "") for t in self.terms))

    @classmethod
    def parse(cls, spec: str) -> "FeatureMap":
        """Build from a ``+``-separated formula such as ``"1 + x1 + x2^2"``."""
        return cls(tuple(t.strip() for t in spec.split("+") if t.strip()))

    @property
    def has_intercept(self):
        return "1" in self.terms

    def bind(self, cov: Mapping[str, np.ndarray]) -> "FeatureMap":
        """Resolve spline knots from ``cov`` (quantiles 0.1, ..., 0.9)."""
        knots = dict(self.knots)
        for term in self.terms:
            m = _SPLINE.match(term)
            if m and term not in knots:
                x = np.asarray(cov[m.group(1)], dtype=float)
                knots[term] = tuple(np.unique(np.quantile(x, SPLINE_QUANTILES)))
        return FeatureMap(self.terms, knots)

    def __call__(self, cov: Mapping[str, np.ndarray]) -> np.ndarray:
        n = len(next(iter(cov.values())))
        cols = []
        for term in self.terms:
            if term == "1":
                cols.append(np.ones(n))
                continue
            m = _SPLINE.match(term)
            if m:
                if term not in self.knots:
                    raise ValueError(f"spline term {term!r} used before bind()")
                basis = natural_spline_basis(cov[m.group(1)], self.knots[term])
                cols.extend(basis.T)
                continue
            value = np.ones(n)
            for token in term.split("*"):
                value = value * _factor(token, cov)
            cols.append(value)
        if not cols:
            return np.empty((n, 0))
        return np.column_stack(cols)

    def __str__(self):
        return " + ".join(self.terms)
