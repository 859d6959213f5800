import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfcal.measures import (FuelCoefficients, IntervalSpec, NotTraversed, aggregate_macro, crossing_time,
                            eq16_mean_rate, fuel_rate, load_fuel_coefficients, mse, traversal_time,
                            vehicle_fuel)
from cfcal.trajectory_data import Trajectory

from conftest import make_traj

VT = load_fuel_coefficients()


def ramp(vid, t0, speed, n=200, dt=0.5, x0=-20.0):
    t = t0 + dt * np.arange(n)
    return Trajectory(vid, t, x0 + speed * (t - t0), np.full(n, speed), np.zeros(n))


# -- mse ----------------------------------------------------------------------------

def test_mse_examples():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0, 0], [1, 1]) == 1.0
    assert mse([1, 2, 3], [2, 2, 5]) == pytest.approx(5 / 3)


def test_mse_errors():
    with pytest.raises(ValueError):
        mse([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        mse([], [])


centi = st.integers(-100_000, 100_000).map(lambda i: i / 100)  # keeps squared differences clear of underflow


@given(st.lists(st.tuples(centi, centi), min_size=1, max_size=30))
def test_mse_symmetric_and_zero_iff_equal(pairs):
    o, s = np.array(pairs).T
    assert mse(o, s) == mse(s, o)
    assert (mse(o, s) == 0) == bool(np.all(o == s))


# -- traversal ------------------------------------------------------------------------

def test_constant_speed_traversal():
    tr = make_traj(10.0 * np.arange(30), dt=1.0)
    assert traversal_time(tr, 20.0, 120.0) == pytest.approx(10.0)


def test_traversal_on_samples():
    tr = make_traj([0, 4, 9, 15, 22, 30], dt=1.0)
    assert traversal_time(tr, 4.0, 22.0) == 3.0


def test_traversal_piecewise_speed():
    # 5 m/s for 2 s then 10 m/s; segment 3..33 m
    x = [0, 5, 10, 20, 30, 40]
    tr = make_traj(x, dt=1.0)
    # entry at 3 m: 0.6 s; exit at 33 m: 4 + 3/10 = 4.3 s
    assert traversal_time(tr, 3.0, 33.0) == pytest.approx(3.7)


def test_traversal_not_reached():
    with pytest.raises(NotTraversed):
        traversal_time(make_traj([0, 1, 2]), 0.5, 10.0)
    with pytest.raises(ValueError):
        traversal_time(make_traj([0, 1, 2]), 2.0, 1.0)


@settings(max_examples=40)
@given(st.lists(st.floats(0.5, 20), min_size=20, max_size=60), st.floats(1.05, 3.0))
def test_faster_is_quicker(speeds, factor):
    v = np.array(speeds)
    x = np.concatenate([[0.0], np.cumsum(v[1:])])
    x_fast = np.concatenate([[0.0], np.cumsum(factor * v[1:])])
    exit_x = 0.8 * x[-1]
    slow = traversal_time(make_traj(x), 0.5 * v[1], exit_x)
    fast = traversal_time(make_traj(x_fast), 0.5 * v[1], exit_x)
    assert fast < slow


def test_crossing_interpolates():
    assert crossing_time([0, 1], [0, 10], 2.5) == pytest.approx(0.25)


# -- mean-rate quantity -----------------------------------------------------------------

def test_eq16_examples():
    assert eq16_mean_rate(make_traj(7.0 * np.arange(5)), 1, 3) == pytest.approx(7.0)
    assert eq16_mean_rate(make_traj([2.0, 2.0, 2.0]), 0, 2) == 0.0
    assert eq16_mean_rate(make_traj([0.0, 3.0, 4.0]), 0, 2) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        eq16_mean_rate(make_traj([0.0, 3.0, 4.0]), 2, 1)


# -- fuel ---------------------------------------------------------------------------------

def test_zero_coefficients_rate_one():
    assert fuel_rate(13.0, -2.0, FuelCoefficients.zeros()) == 1.0
    assert fuel_rate(13.0, 2.0, FuelCoefficients.zeros()) == 1.0


def test_single_constant_term():
    L = np.zeros((4, 4))
    L[0, 0] = math.log(2)
    assert fuel_rate(0.0, 0.0, FuelCoefficients(L, np.zeros((4, 4)))) == pytest.approx(2.0)


def test_vt_micro_desk_value():
    # exp(sum_{m,p} L[m,p] 54^m 1.8^p) evaluated term by term from the shipped file
    assert fuel_rate(15.0, 0.5, VT) == pytest.approx(0.0025702433057502552, rel=1e-12)


def test_regime_selected_by_sign():
    L = np.zeros((4, 4))
    M = np.zeros((4, 4))
    L[0, 0], M[0, 0] = 1.0, 2.0
    c = FuelCoefficients(L, M)
    assert fuel_rate(5.0, 0.0, c) == pytest.approx(math.e)
    assert fuel_rate(5.0, -0.1, c) == pytest.approx(math.e**2)


def test_coefficient_shape_checked(tmp_path):
    with pytest.raises(ValueError):
        FuelCoefficients(np.zeros((3, 4)), np.zeros((4, 4)))
    p = tmp_path / "bad.csv"
    p.write_text("1,2,3,4\n" * 7)
    with pytest.raises(ValueError, match="8 rows"):
        load_fuel_coefficients(p)


def test_coefficient_file_hash_pinned():
    assert len(VT.sha256) == 64
    assert VT.speed_scale == 3.6 and VT.accel_range == (-5.4, 13.32)


def test_vehicle_fuel_single_step_and_doubling():
    c = FuelCoefficients.zeros()
    one = Trajectory("a", [0.0, 1.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0])
    total, per = vehicle_fuel(one, c, dt=1.0)
    assert total == 2.0  # two samples, rate 1 each
    assert per == pytest.approx(2.0 / 1.0 * 1e5)


def test_vehicle_fuel_hand_quadrature():
    L = np.zeros((4, 4))
    L[1, 0] = 0.1  # rate = exp(0.1 v)
    c = FuelCoefficients(L, L.copy())
    tr = Trajectory("a", [0, 0.5, 1.0], [0, 1, 3], [0, 2, 4], [0, 4, 4])
    total, _ = vehicle_fuel(tr, c)
    assert total == pytest.approx(0.5 * (1 + math.exp(0.2) + math.exp(0.4)))


def test_vehicle_fuel_stationary_has_no_per_distance():
    tr = Trajectory("a", [0, 1, 2], [5, 5, 5], [0, 0, 0], [0, 0, 0])
    total, per = vehicle_fuel(tr, VT)
    assert total > 0 and per is None


# -- aggregation ------------------------------------------------------------------------------

SPEC = IntervalSpec((0.0, 10.0, 20.0, 30.0), entry_x=0.0, exit_x=100.0)


def test_aggregate_one_vehicle_per_interval():
    trs = [ramp("a", 0, 10.0), ramp("b", 10, 5.0)]
    m = aggregate_macro(trs, SPEC, VT)
    np.testing.assert_allclose(m.travel_times()[:2], [10.0, 20.0])
    assert m.empty == [2]
    for tr, iv in zip(trs, m.intervals):
        assert iv.fuel == pytest.approx(vehicle_fuel(tr, VT)[1])


def test_aggregate_identical_vehicles():
    m = aggregate_macro([ramp("a", 0, 8.0), ramp("b", 0, 8.0)], SPEC, VT)
    assert m.intervals[0].count == 2
    assert m.intervals[0].travel_time == pytest.approx(12.5)


def test_aggregate_mean_of_three():
    # traversal times 10, 12, 14 s over 120 m
    spec = IntervalSpec((0.0, 50.0), 0.0, 120.0)
    trs = [ramp(v, 0, 120.0 / T) for v, T in (("a", 10.0), ("b", 12.0), ("c", 14.0))]
    assert aggregate_macro(trs, spec, VT).intervals[0].travel_time == pytest.approx(12.0)


def test_non_traversing_vehicle_excluded():
    short = ramp("s", 0, 1.0, n=10)
    m = aggregate_macro([short, ramp("a", 0, 10.0)], SPEC, VT)
    assert [e[0] for e in m.excluded] == ["s"]
    assert m.intervals[0].count == 1


def test_sim_equals_obs_identity():
    rng = np.random.default_rng(5)
    trs = [ramp(f"v{i}", rng.uniform(0, 25), rng.uniform(4, 15)) for i in range(12)]
    copies = [Trajectory(t.vehicle_id, t.t.copy(), t.x.copy(), t.v.copy(), t.a.copy()) for t in trs]
    a, b = aggregate_macro(trs, SPEC, VT), aggregate_macro(copies, SPEC, VT)
    np.testing.assert_array_equal(a.travel_times(), b.travel_times())
    np.testing.assert_array_equal(a.fuels(), b.fuels())


def test_interval_spec_validation():
    with pytest.raises(ValueError):
        IntervalSpec((0.0, 0.0), 0, 1)
    with pytest.raises(ValueError):
        IntervalSpec((0.0, 1.0), 5, 1)
    iv = IntervalSpec.from_dict({"start": 0, "end": 60, "width": 15, "entry_x": 0, "exit_x": 200})
    assert iv.n_intervals == 4 and iv.interval_of(60.0) == 3 and iv.interval_of(61.0) is None
