import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfcal.trajectory_data import (CleaningConfig, CyclicLeaderError, TrajectoryFormatError, build_platoons,
                                   clean_trajectory, detect_drift_points, differentiate, load_trajectories,
                                   moving_average, reconstruct_points, smooth_moving_average,
                                   write_trajectories)

from conftest import make_traj


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- loading ------------------------------------------------------------------------

def test_load_three_rows_one_vehicle(tmp_path):
    p = write(tmp_path, "id,t_sec,x_utm,y_utm,v,a,pre_id\n"
                        "7,0.0,10,0,5,0,\n7,0.1,10.5,0,5,0,\n7,0.2,11,0,5,0,\n")
    data = load_trajectories(p)
    assert list(data) == ["7"]
    assert len(data["7"].points) == 3
    np.testing.assert_allclose(data["7"].x, [10, 10.5, 11])


def test_header_only_gives_empty_dataset(tmp_path):
    p = write(tmp_path, "id,t_sec,position\n")
    assert load_trajectories(p) == {}


def test_non_uniform_step_reported(tmp_path):
    p = write(tmp_path, "id,t_sec,position\nA,0.0,0\nA,0.1,1\nA,0.3,2\n")
    with pytest.raises(TrajectoryFormatError, match=r"non-uniform time step at t=0\.3"):
        load_trajectories(p)


def test_malformed_row_names_line(tmp_path):
    p = write(tmp_path, "id,t_sec,position\nA,0.0,0\nA,zero,1\n")
    with pytest.raises(TrajectoryFormatError, match="line 3"):
        load_trajectories(p)


def test_missing_required_column(tmp_path):
    p = write(tmp_path, "id,position\nA,0\n")
    with pytest.raises(TrajectoryFormatError, match="t_sec"):
        load_trajectories(p)


def test_optional_columns_absent_are_none(tmp_path):
    p = write(tmp_path, "id,t_sec,position\nA,0,0\nA,1,1\nA,2,3\n")
    tr = load_trajectories(p)["A"]
    assert tr.y is None and tr.lane is None and tr.edge is None
    # speeds filled by backward differences
    np.testing.assert_allclose(tr.v, [1, 1, 2])


def test_roundtrip_write_load(tmp_path):
    tr = make_traj([0, 1, 3, 6], v=np.array([1.0, 1, 2, 3]), a=np.array([0.0, 0, 1, 1]))
    p = tmp_path / "out.csv"
    write_trajectories(p, {"A": tr})
    back = load_trajectories(p)["A"]
    np.testing.assert_array_equal(back.x, tr.x)
    np.testing.assert_array_equal(back.v, tr.v)


# -- drift ----------------------------------------------------------------------------

def _xy(points):
    pts = np.asarray(points, float)
    return make_traj(pts[:, 0], y=pts[:, 1])


def test_collinear_has_no_drift():
    assert detect_drift_points(_xy([(0, 0), (1, 0), (2, 0)]), CleaningConfig()) == set()


def test_sharp_back_turn_flagged():
    # direction (1,0) then (-0.9,0.05): turning angle ~176.8 deg, interior ~3.2 deg
    assert detect_drift_points(_xy([(0, 0), (1, 0), (0.1, 0.05)]), CleaningConfig()) == {1}


def test_gentle_curve_not_flagged():
    # turning angle ~11.3 deg, far from a reversal
    assert detect_drift_points(_xy([(0, 0), (1, 0), (2, 0.2)]), CleaningConfig()) == set()


def test_zero_length_vector_never_flagged():
    assert detect_drift_points(_xy([(0, 0), (0, 0), (1, 0)]), CleaningConfig()) == set()


def test_fewer_than_three_points():
    assert detect_drift_points(_xy([(0, 0), (1, 0)]), CleaningConfig()) == set()


@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=40))
def test_monotone_1d_never_drifts(steps):
    x = np.concatenate([[0.0], np.cumsum(steps)])
    assert detect_drift_points(make_traj(x, y=np.zeros(len(x)))) == set()


# -- reconstruction --------------------------------------------------------------------

def test_reconstruct_interior():
    out = reconstruct_points(make_traj([0, 1, 9, 3, 4]), {2}, window=5)
    assert out.x[2] == pytest.approx(2.0)
    np.testing.assert_array_equal(out.t, np.arange(5.0))


def test_reconstruct_nothing_is_identity():
    tr = make_traj([0, 1, 9, 3, 4])
    assert reconstruct_points(tr, set()) is tr


def test_reconstruct_first_point_uses_following_window():
    out = reconstruct_points(make_traj([100, 1, 2, 3, 4]), {0}, window=5)
    assert out.x[0] == pytest.approx((1 + 2) / 2)


def test_reconstruct_empty_window_interpolates():
    out = reconstruct_points(make_traj([0, 1, 2, 3, 4, 5, 6, 7]), {2, 3, 4, 5}, window=3)
    np.testing.assert_allclose(out.x[[3, 4]], [3, 4])


def test_reconstruct_too_many_removed():
    with pytest.raises(ValueError):
        reconstruct_points(make_traj([0, 1, 2]), {0, 1})


# -- smoothing ---------------------------------------------------------------------------

def test_five_point_average_interior():
    assert moving_average([0, 1, 2, 3, 4], 5)[2] == pytest.approx(2.0)
    assert moving_average([0, 0, 5, 0, 0], 5)[2] == pytest.approx(1.0)


def test_boundary_uses_truncated_symmetric_window():
    out = moving_average([0, 3, 6, 30, 12], 5)
    assert out[0] == 0.0
    assert out[1] == pytest.approx(3.0)
    assert out[3] == pytest.approx(16.0)


def test_smoothing_needs_window_points():
    with pytest.raises(ValueError):
        smooth_moving_average(make_traj([0, 1, 2]), CleaningConfig(window=5))


@given(st.floats(-1e6, 1e6), st.integers(5, 60))
def test_smoothing_constant_idempotent(c, n):
    out = smooth_moving_average(make_traj(np.full(n, c)))
    np.testing.assert_allclose(out.x, c, rtol=1e-12, atol=1e-9)
    assert len(out) == n


def test_cleaning_config_validation():
    with pytest.raises(ValueError):
        CleaningConfig(window=4)
    with pytest.raises(ValueError):
        CleaningConfig(angle_threshold=180)


# -- differentiation ----------------------------------------------------------------------

def test_differentiate_linear():
    d = differentiate(make_traj([0, 1, 2, 3]))
    np.testing.assert_allclose(d.v[1:], 1)
    np.testing.assert_allclose(d.a[2:], 0)


def test_differentiate_stationary():
    d = differentiate(make_traj([0, 0, 0]))
    assert np.all(d.v == 0) and np.all(d.a == 0)


def test_differentiate_quadratic():
    d = differentiate(make_traj([0, 1, 3, 6]))
    np.testing.assert_allclose(d.v, [1, 1, 2, 3])
    np.testing.assert_allclose(d.a, [1, 1, 1, 1])


@settings(max_examples=60)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=50), st.sampled_from([0.1, 0.5, 1.0]))
def test_differentiate_inverts_semi_implicit_integration(acc, dt):
    a = np.array([0.0] + acc)
    v = 5.0 + np.cumsum(a * dt)
    v[0] = 5.0
    x = np.concatenate([[0.0], np.cumsum(v[1:] * dt)])
    d = differentiate(make_traj(x, dt=dt))
    np.testing.assert_allclose(d.v[1:], v[1:], atol=1e-9)
    np.testing.assert_allclose(d.a[2:], a[2:], atol=1e-7)


@settings(max_examples=30)
@given(st.lists(st.floats(0, 3), min_size=6, max_size=30))
def test_cleaning_preserves_ids_and_times(steps):
    x = np.concatenate([[0.0], np.cumsum(steps)])
    tr = make_traj(x, dt=0.1, vid="veh", y=np.zeros(len(x)))
    out, _ = clean_trajectory(tr)
    assert out.vehicle_id == "veh"
    np.testing.assert_array_equal(out.t, tr.t)
    assert np.all(out.v >= 0)


# -- platoons --------------------------------------------------------------------------

def _linked(vid, x, leader, n=101, dt=0.1):
    return make_traj(np.asarray(x, float) + np.arange(n) * dt * 10, dt=dt, vid=vid,
                     leader_id=[leader] * n)


def test_pair_chain():
    data = {"A": _linked("A", 50, None), "B": _linked("B", 20, "A")}
    idx = build_platoons(data)
    assert [c.vehicles for c in idx.chains] == [("A", "B")]
    assert idx.chains[0].t_end - idx.chains[0].t_start == pytest.approx(10.0)


def test_three_chain():
    data = {"A": _linked("A", 80, None), "B": _linked("B", 50, "A"), "C": _linked("C", 20, "B")}
    assert [c.vehicles for c in build_platoons(data).chains] == [("A", "B", "C")]


def test_follower_ahead_excluded():
    x = np.full(101, 20.0)
    x[50] = 60.0
    data = {"A": _linked("A", 50, None), "B": _linked("B", x, "A")}
    idx = build_platoons(data)
    assert idx.chains == []
    assert idx.excluded and idx.excluded[0][:2] == ("A", "B")


def test_cycle_detected():
    a_lead = ["B"] * 5 + [None] * 5
    b_lead = [None] * 5 + ["A"] * 5
    xa = np.array([0, 1, 2, 3, 4, 100, 101, 102, 103, 104], float)
    xb = np.array([50, 51, 52, 53, 54, 10, 11, 12, 13, 14], float)
    data = {"A": make_traj(xa, vid="A", leader_id=a_lead), "B": make_traj(xb, vid="B", leader_id=b_lead)}
    with pytest.raises(CyclicLeaderError, match="A"):
        build_platoons(data)


def test_leaders_inferred_from_position_order():
    n = 20
    data = {v: make_traj(x0 + np.arange(n), vid=v) for v, x0 in [("A", 40.0), ("B", 20.0), ("C", 0.0)]}
    assert [c.vehicles for c in build_platoons(data).chains] == [("A", "B", "C")]
