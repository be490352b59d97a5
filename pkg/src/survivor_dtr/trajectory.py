"""Observed two-stage trajectories with monotone censoring and truncation by death.

A record is ``(x1, a1, c1, s1, x2, a2, c2, s2, y)``.  Censoring at a stage hides
everything after it, death at a stage hides everything after it, so only five
presence patterns are legal::

    c1=1                     -> x1 a1 c1
    c1=0, s1=0               -> ... s1
    c1=0, s1=1, c2=1         -> ... s1 x2 a2 c2
    c1=0, s1=1, c2=0, s2=0   -> ... s1 x2 a2 c2 s2
    c1=0, s1=1, c2=0, s2=1   -> everything, including y

Datasets are stored column-wise as float arrays with ``NaN`` marking absent
fields; :class:`Trajectory` objects are materialized on demand.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import MonotoneViolation, ParseError

OPTIONAL_FIELDS = ("s1", "x2", "a2", "c2", "s2", "y")
BINARY_FIELDS = ("a1", "c1", "s1", "a2", "c2", "s2")


@dataclass(frozen=True)
class Trajectory:
    x1: tuple
    a1: int
    c1: int
    s1: int | None = None
    x2: tuple | None = None
    a2: int | None = None
    c2: int | None = None
    s2: int | None = None
    y: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "x1", tuple(float(v) for v in np.atleast_1d(self.x1)))
        if self.x2 is not None:
            object.__setattr__(self, "x2", tuple(float(v) for v in np.atleast_1d(self.x2)))
        for name in BINARY_FIELDS:
            value = getattr(self, name)
            if value is not None and value not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {value!r}")

    def present(self, name):
        return getattr(self, name) is not None


def _expected_presence(c1, s1, c2, s2):
    """Which optional fields must be present given the observed indicators."""
    need = {"s1": c1 == 0}
    reach2 = need["s1"] and s1 == 1
    need["x2"] = need["a2"] = need["c2"] = reach2
    need["s2"] = reach2 and c2 == 0
    need["y"] = need["s2"] and s2 == 1
    return need


def validate(t: Trajectory) -> None:
    """Raise :class:`MonotoneViolation` unless ``t`` has a legal presence pattern.

    The reported field is the first one, in record order, whose presence
    disagrees with the pattern implied by the indicators before it.
    """
    need = _expected_presence(t.c1, t.s1, t.c2, t.s2)
    for name in OPTIONAL_FIELDS:
        if t.present(name) != need[name]:
            raise MonotoneViolation(name)


class Dataset:
    """Immutable column store of validated trajectories.

    Parameters
    ----------
    x1 : array, shape (n, p1)
    a1, c1 : arrays, shape (n,)
    s1, a2, c2, s2, y : arrays, shape (n,), ``NaN`` where absent
    x2 : array, shape (n, p2), rows of ``NaN`` where absent
    validate : bool
        Check every row against the monotone presence patterns.
    """

    def __init__(self, x1, a1, c1, s1, x2, a2, c2, s2, y, *, validate=True):
        n = len(a1)
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        self.x1 = x1.reshape(n, -1)
        self.x2 = x2.reshape(n, -1)
        self.a1 = np.asarray(a1, dtype=float)
        self.c1 = np.asarray(c1, dtype=float)
        self.s1 = np.asarray(s1, dtype=float)
        self.a2 = np.asarray(a2, dtype=float)
        self.c2 = np.asarray(c2, dtype=float)
        self.s2 = np.asarray(s2, dtype=float)
        self.y = np.asarray(y, dtype=float)
        for arr in self._arrays():
            arr.setflags(write=False)
        if validate:
            self._validate()

    def _arrays(self):
        return (self.x1, self.a1, self.c1, self.s1, self.x2, self.a2, self.c2, self.s2, self.y)

    @property
    def n(self):
        return len(self.a1)

    @property
    def p1(self):
        return self.x1.shape[1]

    @property
    def p2(self):
        return self.x2.shape[1]

    def __len__(self):
        return self.n

    # presence masks -------------------------------------------------------
    @property
    def reached2(self):
        """Rows observed at stage 2 (``c1 = 0`` and ``s1 = 1``)."""
        return (self.c1 == 0) & (self.s1 == 1)

    @property
    def observed_y(self):
        return self.reached2 & (self.c2 == 0) & (self.s2 == 1)

    def _validate(self):
        n = self.n
        for name in BINARY_FIELDS:
            col = getattr(self, name)
            bad = ~(np.isnan(col) | (col == 0) | (col == 1))
            if name in ("a1", "c1"):
                bad |= np.isnan(col)
            if bad.any():
                raise ParseError(int(np.argmax(bad)), name, "binary field must be 0 or 1")
        if np.isnan(self.x1).any():
            row = int(np.argmax(np.isnan(self.x1).any(axis=1)))
            raise ParseError(row, "x1", "baseline covariates are mandatory")
        x2_any = ~np.isnan(self.x2).all(axis=1) if self.p2 else np.zeros(n, bool)
        x2_all = ~np.isnan(self.x2).any(axis=1) if self.p2 else np.zeros(n, bool)
        present = {
            "s1": ~np.isnan(self.s1),
            "x2": x2_any,
            "a2": ~np.isnan(self.a2),
            "c2": ~np.isnan(self.c2),
            "s2": ~np.isnan(self.s2),
            "y": ~np.isnan(self.y),
        }
        need = {"s1": self.c1 == 0}
        reach2 = need["s1"] & (self.s1 == 1)
        need["x2"] = need["a2"] = need["c2"] = reach2
        need["s2"] = reach2 & (self.c2 == 0)
        need["y"] = need["s2"] & (self.s2 == 1)
        first_bad = np.full(n, len(OPTIONAL_FIELDS))
        for i, name in reversed(list(enumerate(OPTIONAL_FIELDS))):
            mismatch = present[name] != need[name]
            if name == "x2":
                mismatch |= x2_any & ~x2_all
            first_bad = np.where(mismatch, i, first_bad)
        bad_rows = np.flatnonzero(first_bad < len(OPTIONAL_FIELDS))
        if bad_rows.size:
            row = int(bad_rows[0])
            raise MonotoneViolation(OPTIONAL_FIELDS[first_bad[row]], row=row)

    # row access -----------------------------------------------------------
    def __getitem__(self, i) -> Trajectory:
        x2 = None if np.isnan(self.x2[i]).all() else tuple(self.x2[i])

        def b(col):
            v = col[i]
            return None if np.isnan(v) else int(v)

        return Trajectory(
            x1=tuple(self.x1[i]),
            a1=int(self.a1[i]),
            c1=int(self.c1[i]),
            s1=b(self.s1),
            x2=x2,
            a2=b(self.a2),
            c2=b(self.c2),
            s2=b(self.s2),
            y=None if np.isnan(self.y[i]) else float(self.y[i]),
        )

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(self.n):
            yield self[i]

    @property
    def rows(self):
        return list(self)

    @classmethod
    def from_rows(cls, rows: Sequence[Trajectory], p2=None) -> "Dataset":
        rows = list(rows)
        if not rows:
            raise ValueError("a dataset needs at least one row")
        for i, t in enumerate(rows):
            try:
                validate(t)
            except MonotoneViolation as err:
                raise MonotoneViolation(err.field, row=i) from None
        p1 = len(rows[0].x1)
        if p2 is None:
            p2 = next((len(t.x2) for t in rows if t.x2 is not None), 1)
        nan = float("nan")

        def col(name):
            return [nan if getattr(t, name) is None else getattr(t, name) for t in rows]

        x1 = np.array([t.x1 for t in rows], dtype=float)
        if x1.shape[1] != p1:
            raise ValueError("rows disagree on the dimension of x1")
        x2 = np.full((len(rows), p2), nan)
        for i, t in enumerate(rows):
            if t.x2 is not None:
                if len(t.x2) != p2:
                    raise ValueError("rows disagree on the dimension of x2")
                x2[i] = t.x2
        return cls(
            x1, col("a1"), col("c1"), col("s1"), x2, col("a2"), col("c2"), col("s2"), col("y"),
            validate=False,
        )

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(*(arr[index] for arr in self._arrays()), validate=False)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            *(np.concatenate([a, b]) for a, b in zip(self._arrays(), other._arrays())),
            validate=False,
        )

    def equals(self, other: "Dataset") -> bool:
        """Field-by-field equality, treating absent fields as equal."""
        if self.n != other.n or self.p1 != other.p1 or self.p2 != other.p2:
            return False
        return all(
            np.array_equal(a, b, equal_nan=True) for a, b in zip(self._arrays(), other._arrays())
        )

    def covariates(self):
        """Named covariate columns used by feature maps and policies.

        Keys are ``x1_j``/``x2_j`` (1-based), plus ``x1``/``x2`` aliases when the
        dimension is one, and the treatment ``a1``.
        """
        return covariate_dict(self.x1, self.x2, self.a1)

    def __repr__(self):
        return f"Dataset(n={self.n}, p1={self.p1}, p2={self.p2})"


def covariate_dict(x1, x2=None, a1=None):
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    cov = {f"x1_{j + 1}": x1[:, j] for j in range(x1.shape[1])}
    if x1.shape[1] == 1:
        cov["x1"] = x1[:, 0]
    if x2 is not None:
        x2 = np.asarray(x2, dtype=float).reshape(x1.shape[0], -1)
        cov.update({f"x2_{j + 1}": x2[:, j] for j in range(x2.shape[1])})
        if x2.shape[1] == 1:
            cov["x2"] = x2[:, 0]
    if a1 is not None:
        cov["a1"] = np.broadcast_to(np.asarray(a1, dtype=float), (x1.shape[0],))
    return cov


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def default_schema(p1, p2):
    cols = [f"x1_{j + 1}" for j in range(p1)] + ["a1", "c1", "s1"]
    cols += [f"x2_{j + 1}" for j in range(p2)] + ["a2", "c2", "s2", "y"]
    return cols


def read_csv(path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Parse a CSV file into a validated :class:`Dataset`.

    Parameters
    ----------
    path : path-like
    schema : mapping, optional
        Maps canonical names (``x1_1``, ``a1``, ..., ``y``) to header names in
        the file.  Covariate dimensions are inferred from the ``x1_*`` and
        ``x2_*`` canonical names found in the (mapped) header.

    Raises
    ------
    ParseError
        Non-numeric cell or missing mandatory column.
    MonotoneViolation
        Illegal presence pattern; ``row`` is the 0-based data row index.
    """
    schema = dict(schema or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(0, "<header>", "empty file") from None
        header = [h.strip() for h in header]
        reverse = {v: k for k, v in schema.items()}
        canon = [reverse.get(h, h) for h in header]
        pos = {name: i for i, name in enumerate(canon)}
        p1 = sum(1 for c in canon if c.startswith("x1_"))
        p2 = sum(1 for c in canon if c.startswith("x2_"))
        if p1 == 0 and "x1" in pos:
            pos["x1_1"], p1 = pos["x1"], 1
        if p2 == 0 and "x2" in pos:
            pos["x2_1"], p2 = pos["x2"], 1
        for name in default_schema(p1, max(p2, 1)):
            if name not in pos and not (p2 == 0 and name.startswith("x2_")):
                raise ParseError(0, schema.get(name, name), "column missing from header")
        records = []
        for r, line in enumerate(reader):
            if not line or all(not cell.strip() for cell in line):
                continue
            rec = {}
            for name in default_schema(p1, p2):
                cell = line[pos[name]].strip() if pos[name] < len(line) else ""
                if cell == "":
                    rec[name] = float("nan")
                    continue
                try:
                    rec[name] = float(cell)
                except ValueError:
                    raise ParseError(len(records), schema.get(name, name), f"not a number: {cell!r}") from None
                if name in BINARY_FIELDS and rec[name] not in (0.0, 1.0):
                    raise ParseError(len(records), schema.get(name, name), "binary field must be 0 or 1")
            records.append(rec)
    if not records:
        raise ParseError(0, "<rows>", "no data rows")

    def col(name):
        return np.array([rec[name] for rec in records])

    x1 = np.column_stack([col(f"x1_{j + 1}") for j in range(p1)])
    x2 = (
        np.column_stack([col(f"x2_{j + 1}") for j in range(p2)])
        if p2
        else np.full((len(records), 1), np.nan)
    )
    for name in ("a1", "c1"):
        missing = np.isnan(col(name))
        if missing.any():
            raise ParseError(int(np.argmax(missing)), schema.get(name, name), "mandatory field is empty")
    return Dataset(x1, col("a1"), col("c1"), col("s1"), x2, col("a2"), col("c2"), col("s2"), col("y"))


def write_csv(d: Dataset, path) -> None:
    """Write ``d`` with the default column names; absent fields become empty cells."""
    header = default_schema(d.p1, d.p2)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(d.n):
            row = [_cell(v) for v in d.x1[i]]
            row += [_bin(d.a1[i]), _bin(d.c1[i]), _bin(d.s1[i])]
            row += [_cell(v) for v in d.x2[i]]
            row += [_bin(d.a2[i]), _bin(d.c2[i]), _bin(d.s2[i]), _cell(d.y[i])]
            writer.writerow(row)


def _cell(v):
    return "" if np.isnan(v) else repr(float(v))


def _bin(v):
    return "" if np.isnan(v) else str(int(v))


# --------------------------------------------------------------------------
# K-stage records
# --------------------------------------------------------------------------

class StagedData:
    """Column store for K-stage trajectories (the natural extension of :class:`Dataset`).

    ``x`` is a list of K arrays of shape (n, p_k); ``a``, ``c``, ``s`` are (n, K)
    arrays; ``y`` has shape (n,).  ``NaN`` marks absent entries.  Stage k is
    observed iff every earlier stage is uncensored and survived.
    """

    def __init__(self, x: Sequence[np.ndarray], a, c, s, y, *, validate=True):
        self.x = [np.asarray(xk, dtype=float).reshape(len(y), -1) for xk in x]
        self.a = np.asarray(a, dtype=float).reshape(len(y), -1)
        self.c = np.asarray(c, dtype=float).reshape(len(y), -1)
        self.s = np.asarray(s, dtype=float).reshape(len(y), -1)
        self.y = np.asarray(y, dtype=float)
        if validate:
            self._validate()

    @property
    def K(self):
        return self.a.shape[1]

    @property
    def n(self):
        return len(self.y)

    def __len__(self):
        return self.n

    def reached(self, k):
        """Rows observed at stage ``k`` (1-based)."""
        mask = np.ones(self.n, bool)
        for j in range(k - 1):
            mask &= (self.c[:, j] == 0) & (self.s[:, j] == 1)
        return mask

    def _validate(self):
        for k in range(1, self.K + 1):
            seen = self.reached(k)
            j = k - 1
            checks = [
                (f"x{k}", ~np.isnan(self.x[j]).any(axis=1), seen),
                (f"a{k}", ~np.isnan(self.a[:, j]), seen),
                (f"c{k}", ~np.isnan(self.c[:, j]), seen),
                (f"s{k}", ~np.isnan(self.s[:, j]), seen & (self.c[:, j] == 0)),
            ]
            for name, present, need in checks:
                bad = present != need
                if bad.any():
                    raise MonotoneViolation(name, row=int(np.argmax(bad)))
        done = self.reached(self.K + 1)
        bad = (~np.isnan(self.y)) != done
        if bad.any():
            raise MonotoneViolation("y", row=int(np.argmax(bad)))

    def covariates(self, k):
        """Named history covariates available at stage ``k``: ``xj_i`` for j <= k and ``aj`` for j < k."""
        cov = {}
        for j in range(k):
            xj = self.x[j]
            for i in range(xj.shape[1]):
                cov[f"x{j + 1}_{i + 1}"] = xj[:, i]
            if xj.shape[1] == 1:
                cov[f"x{j + 1}"] = xj[:, 0]
        for j in range(k - 1):
            cov[f"a{j + 1}"] = self.a[:, j]
        return cov

    @classmethod
    def from_dataset(cls, d: Dataset) -> "StagedData":
        return cls(
            [d.x1, d.x2],
            np.column_stack([d.a1, d.a2]),
            np.column_stack([d.c1, d.c2]),
            np.column_stack([d.s1, d.s2]),
            d.y,
            validate=False,
        )

    def to_dataset(self) -> Dataset:
        if self.K != 2:
            raise ValueError("only two-stage data converts to Dataset")
        return Dataset(
            self.x[0], self.a[:, 0], self.c[:, 0], self.s[:, 0], self.x[1],
            self.a[:, 1], self.c[:, 1], self.s[:, 1], self.y,
        )
