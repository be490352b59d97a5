import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fuzz_dataset
from survivor_dtr.errors import MonotoneViolation, ParseError
from survivor_dtr.simulation import SimConfig, simulate
from survivor_dtr.trajectory import (OPTIONAL_FIELDS, Dataset, StagedData, Trajectory, _expected_presence,
                                     read_csv, validate, write_csv)


def test_censored_at_stage_one_is_legal():
    validate(Trajectory(x1=[0.1], a1=1, c1=1))


def test_survival_after_censoring_is_rejected():
    with pytest.raises(MonotoneViolation) as exc:
        validate(Trajectory(x1=[0.1], a1=1, c1=1, s1=1))
    assert exc.value.field == "s1"


def test_fully_observed_is_legal():
    validate(Trajectory(x1=[0.1], a1=0, c1=0, s1=1, x2=[0.5], a2=1, c2=0, s2=1, y=2.3))


def test_binary_fields_checked():
    with pytest.raises(ValueError):
        Trajectory(x1=[0.1], a1=2, c1=0)


indicator = st.sampled_from([0, 1])


@settings(max_examples=400, deadline=None)
@given(c1=indicator, s1=indicator, c2=indicator, s2=indicator, mask=st.integers(0, 63))
def test_every_presence_mask(c1, s1, c2, s2, mask):
    present = {name: bool(mask >> i & 1) for i, name in enumerate(OPTIONAL_FIELDS)}
    values = {"s1": s1, "x2": (0.3,), "a2": 1, "c2": c2, "s2": s2, "y": 1.5}
    t = Trajectory(x1=(0.0,), a1=0, c1=c1, **{k: values[k] if present[k] else None for k in OPTIONAL_FIELDS})
    need = _expected_presence(c1, t.s1, t.c2, t.s2)
    legal = all(present[k] == need[k] for k in OPTIONAL_FIELDS)
    if legal:
        validate(t)
    else:
        with pytest.raises(MonotoneViolation):
            validate(t)


def _write(path, text):
    path.write_text(text)
    return path


HEADER = "x1_1,a1,c1,s1,x2_1,a2,c2,s2,y\n"


def test_read_three_rows(tmp_path):
    p = _write(tmp_path / "d.csv", HEADER + "0.1,1,1,,,,,,\n0.2,0,0,0,,,,,\n0.3,1,0,1,0.4,0,0,1,2.5\n")
    d = read_csv(p)
    assert d.n == 3 and d.observed_y.sum() == 1


def test_outcome_after_death_reports_row(tmp_path):
    p = _write(tmp_path / "d.csv", HEADER + "0.1,1,1,,,,,,\n0.3,1,0,1,0.4,0,0,0,2.5\n")
    with pytest.raises(MonotoneViolation) as exc:
        read_csv(p)
    assert exc.value.field == "y" and exc.value.row == 1


def test_non_numeric_cell(tmp_path):
    p = _write(tmp_path / "d.csv", HEADER + "abc,1,1,,,,,,\n")
    with pytest.raises(ParseError) as exc:
        read_csv(p)
    assert exc.value.column == "x1_1"


def test_schema_mapping(tmp_path):
    p = _write(tmp_path / "d.csv", "age,trt,cens,surv,x2_1,a2,c2,s2,y\n0.1,1,1,,,,,,\n")
    d = read_csv(p, schema={"x1_1": "age", "a1": "trt", "c1": "cens", "s1": "surv"})
    assert d.n == 1 and d.a1[0] == 1


def test_write_full_row(tmp_path):
    d = Dataset.from_rows([Trajectory(x1=[0.1], a1=0, c1=0, s1=1, x2=[0.5], a2=1, c2=0, s2=1, y=2.3)])
    write_csv(d, tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert len(lines) == 2 and "" not in lines[1].split(",")


def test_write_censored_row_empty_cells(tmp_path):
    d = Dataset.from_rows([Trajectory(x1=[0.1], a1=1, c1=1)], p2=1)
    write_csv(d, tmp_path / "o.csv")
    cells = (tmp_path / "o.csv").read_text().splitlines()[1].split(",")
    assert cells[3:] == [""] * 6


def test_round_trip_simulated(tmp_path):
    d = simulate(SimConfig.from_preset("dgp1", n=100), 1)
    write_csv(d, tmp_path / "o.csv")
    assert read_csv(tmp_path / "o.csv").equals(d)


def test_dataset_is_read_only():
    d = fuzz_dataset(np.random.default_rng(0), 20)
    with pytest.raises(ValueError):
        d.y[0] = 1.0


def test_subset_concat_rows():
    d = fuzz_dataset(np.random.default_rng(1), 30)
    assert d.subset(np.arange(10)).concat(d.subset(np.arange(10, 30))).equals(d)
    assert Dataset.from_rows(d.rows).equals(d)


def test_staged_round_trip():
    d = fuzz_dataset(np.random.default_rng(2), 50)
    sd = StagedData.from_dataset(d)
    assert sd.K == 2 and sd.n == 50
    assert sd.to_dataset().equals(d)
    assert np.array_equal(sd.reached(2), d.reached2)
