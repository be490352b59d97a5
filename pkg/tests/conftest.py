import sys

import numpy as np
import pytest

import survivor_dtr.crossfit as crossfit_mod
import survivor_dtr.estimators as est_mod
from survivor_dtr.simulation import SimConfig, simulate
from survivor_dtr.trajectory import Dataset

ACCEPTANCE_LINES = []
_REPORTS = []
_original_report = est_mod._report


def _recording_report(*args, **kwargs):
    rep = _original_report(*args, **kwargs)
    _REPORTS.append(rep)
    return rep


for _mod in (est_mod, crossfit_mod):
    _mod._report = _recording_report


@pytest.fixture(autouse=True)
def eif_mean_zero():
    """Every report carrying influence values produced by a test must have mean zero."""
    start = len(_REPORTS)
    yield
    for rep in _REPORTS[start:]:
        if "mean_psi" in rep.diagnostics:
            assert abs(rep.diagnostics["mean_psi"]) <= 1e-10, rep


def recorded_reports():
    return list(_REPORTS)


def record_acceptance(number, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, file=sys.stderr)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: _sort_key(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


def _sort_key(label):
    digits = "".join(ch for ch in label if ch.isdigit())
    return int(digits or 0), label


def fuzz_dataset(rng, n, full=False, p1=1, p2=1):
    """Random dataset with legal presence patterns (every row fully observed when ``full``)."""
    x1 = rng.normal(size=(n, p1))
    a1 = rng.integers(0, 2, n).astype(float)
    c1 = np.zeros(n) if full else (rng.random(n) < 0.15).astype(float)
    s1 = np.where(c1 == 0, 1.0 if full else (rng.random(n) < 0.85), np.nan)
    reach = (c1 == 0) & (s1 == 1)
    x2 = np.where(reach[:, None], rng.normal(size=(n, p2)), np.nan)
    a2 = np.where(reach, rng.integers(0, 2, n), np.nan)
    c2 = np.where(reach, 0.0 if full else (rng.random(n) < 0.15), np.nan)
    s2 = np.where(reach & (c2 == 0), 1.0 if full else (rng.random(n) < 0.8), np.nan)
    y = np.where(reach & (c2 == 0) & (s2 == 1), rng.normal(size=n) + x1[:, 0], np.nan)
    return Dataset(x1, a1, c1, s1, x2, a2, c2, s2, y)


@pytest.fixture(scope="session")
def dgp1():
    return SimConfig.from_preset("dgp1")


@pytest.fixture(scope="session")
def sample2000(dgp1):
    return simulate(dgp1.replace(n=2000), 11)
