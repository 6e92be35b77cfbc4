import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchepi import io
from branchepi.core import baseline_params, new_state
from branchepi.meanfield import build_transition_matrix, simulate_meanfield


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_two_day_series(tmp_path):
    s = io.load_observations(write(tmp_path, "obs.csv", "date,count\n2020-02-08,0\n2020-02-09,1\n"))
    assert len(s) == 2
    assert s.start == dt.date(2020, 2, 8)
    np.testing.assert_array_equal(s.counts, [0, 1])
    assert s.day_index("2020-02-09") == 1


def test_duplicate_date_named(tmp_path):
    p = write(tmp_path, "obs.csv", "date,count\n2020-02-08,0\n2020-02-08,1\n")
    with pytest.raises(io.DataError, match="2020-02-08") as info:
        io.load_observations(p)
    assert ":3:" in str(info.value)


def test_gap_is_missing_not_zero(tmp_path):
    p = write(tmp_path, "obs.csv", "date,count\n2020-02-28,4\n2020-02-29,5\n2020-03-02,7\n")
    s = io.load_observations(p)
    assert len(s) == 4
    np.testing.assert_array_equal(s.missing, [False, False, True, False])


@pytest.mark.parametrize("body,needle", [
    ("2020-02-08,-1\n", "negative"),
    ("2020-02-08,abc\n", "bad number"),
    ("2020-13-08,1\n", "bad date"),
    ("2020-02-08\n", "expected 2 fields"),
    ("2020-02-09,1\n2020-02-08,1\n", "comes after"),
])
def test_malformed_rows(tmp_path, body, needle):
    with pytest.raises(io.DataError, match=needle):
        io.load_observations(write(tmp_path, "obs.csv", "date,count\n" + body))


def test_bad_header(tmp_path):
    with pytest.raises(io.DataError, match=":1:"):
        io.load_observations(write(tmp_path, "obs.csv", "day,count\n2020-02-08,1\n"))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 10_000)), min_size=1, max_size=40)
       .filter(lambda v: v[0] is not None and v[-1] is not None))
def test_observation_round_trip(tmp_path_factory, counts):
    d = tmp_path_factory.mktemp("rt")
    s = io.observations_from_counts([np.nan if c is None else c for c in counts], "2020-02-08")
    io.save_observations(s, d / "a.csv")
    back = io.load_observations(d / "a.csv")
    assert back == s
    io.save_observations(back, d / "b.csv")
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


@pytest.mark.parametrize("suffix", [".json", ".yaml"])
def test_params_round_trip(tmp_path, suffix):
    p = baseline_params(alpha_i=0.25, alpha_a=0.1)
    io.save_params(p, tmp_path / f"p{suffix}")
    assert io.load_params(tmp_path / f"p{suffix}").to_dict() == p.to_dict()


def test_bad_params_file(tmp_path):
    with pytest.raises(io.DataError):
        io.load_params(write(tmp_path, "p.yaml", "p_i: 2.0\n"))
    with pytest.raises(io.DataError):
        io.load_structured(write(tmp_path, "p.yaml", "- 1\n- 2\n"))


def test_trajectory_round_trips(tmp_path):
    traj = simulate_meanfield(build_transition_matrix(baseline_params()),
                              new_state(25, {("E", 1): 200.0}), 30)
    io.write_trajectory_long(tmp_path / "long.csv", traj, 25)
    np.testing.assert_array_equal(io.read_trajectory_long(tmp_path / "long.csv", 25), traj)
    io.write_trajectory_wide(tmp_path / "wide.csv", traj, 25)
    header, table = io.read_table(tmp_path / "wide.csv")
    assert tuple(header) == io.WIDE_COLUMNS
    np.testing.assert_array_equal(table[:, 1], traj[:, -1])
    np.testing.assert_allclose(table[:, 2], traj[:, :25].sum(axis=1), rtol=1e-15)


def test_number_formatting_round_trips():
    for x in [0.1, 1 / 3, 1e-300, 12345678901234.5, 7.0, -2.5]:
        assert float(io.fmt(x)) == x
    assert io.fmt(7.0) == "7"


def test_mobility_file(tmp_path):
    start, v = io.load_mobility(write(tmp_path, "m.csv",
                                      "date,outflow_count\n2020-03-01,10\n2020-03-02,12\n"))
    assert start == dt.date(2020, 3, 1)
    np.testing.assert_array_equal(v, [10, 12])
    with pytest.raises(io.DataError, match="consecutive"):
        io.load_mobility(write(tmp_path, "m2.csv", "date,outflow_count\n2020-03-01,10\n2020-03-03,12\n"))


def test_flows_round_trip(tmp_path):
    flows = {dt.date(2020, 3, 1): {("a", "b", "0-17"): 12.0, ("a", "a", "0-17"): 30.5}}
    io.save_flows(flows, tmp_path / "f.csv")
    assert io.load_flows(tmp_path / "f.csv") == flows
    with pytest.raises(io.DataError, match="duplicate"):
        io.load_flows(write(tmp_path, "g.csv", "date,r1,r2,age,count\n2020-03-01,a,b,0,1\n2020-03-01,a,b,0,2\n"))


def test_visits(tmp_path):
    v = io.load_visits(write(tmp_path, "v.csv", "date,cohort,location,count\n2020-03-01,c1,metro,5\n"))
    assert v == {dt.date(2020, 3, 1): {("c1", "metro"): 5.0}}


def test_manifest_fields(tmp_path):
    path = io.write_manifest(tmp_path, "simulate", {"a": 1}, 7, ["x.csv"], started_at="2020-01-01T00:00:00")
    m = json.loads(path.read_text())
    assert {"command", "config_hash", "seed", "started_at", "outputs"} <= set(m)
    assert m["config_hash"] == io.config_hash({"a": 1})
    assert io.config_hash({"a": 1, "b": 2}) == io.config_hash({"b": 2, "a": 1})
