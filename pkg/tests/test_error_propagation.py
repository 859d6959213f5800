import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfcal.cf_models import LinearParams
from cfcal.error_propagation import (FIG4_PARAMS, figure_case, first_order_expansion, mse_position_decomposition,
                                     mse_speed_decomposition, multi_vehicle_error, platoon_impulse_case,
                                     position_error_closed_form, propagate, recursion_residual,
                                     single_impulse_case, speed_error_closed_form, write_error_csv)

from twins import random_case, twin_errors


def series(values):
    return np.concatenate([[0.0], values])


error_series = st.lists(st.floats(-5, 5), min_size=1, max_size=50).map(series)


# -- single vehicle ------------------------------------------------------------------------

def test_speed_closed_form():
    assert np.all(speed_error_closed_form(np.zeros(6)) == 0)
    np.testing.assert_array_equal(speed_error_closed_form([0, 1, -1, 2]), [0, 1, 0, 2])


def test_position_closed_form():
    assert np.all(position_error_closed_form(np.zeros(6)) == 0)
    np.testing.assert_array_equal(position_error_closed_form([0, 1, 0, 0]), [0, 1, 2, 3])


def test_impulse_at_five():
    e = np.zeros(21)
    e[5] = 0.2
    v, x = speed_error_closed_form(e), position_error_closed_form(e)
    assert np.all(v[5:] == 0.2) and np.all(v[:5] == 0)
    assert x[10] == pytest.approx(1.2)


def test_origin_must_be_zero():
    with pytest.raises(ValueError):
        speed_error_closed_form([1.0, 0.0])


@given(error_series)
def test_closed_forms_match_weighted_sums(e):
    T = len(e) - 1
    x = [sum((t + 1 - s) * e[s] for s in range(1, t + 1)) for t in range(T + 1)]
    np.testing.assert_allclose(position_error_closed_form(e), x, atol=1e-9)


# -- decompositions -------------------------------------------------------------------------

def brute_speed_terms(e):
    """Expand (sum_s e_s)^2 term by term: squares, then ordered pairs."""
    T = len(e) - 1
    sq = sum(e[s] ** 2 for t in range(1, T + 1) for s in range(1, t + 1)) / T
    pairs = sum(2 * e[s] * e[u] for t in range(1, T + 1) for s in range(1, t + 1) for u in range(s + 1, t + 1)) / T
    return sq, pairs


def brute_position_terms(e):
    T = len(e) - 1
    sq = sum(((t + 1 - s) * e[s]) ** 2 for t in range(1, T + 1) for s in range(1, t + 1)) / T
    pairs = sum(2 * (t + 1 - s) * (t + 1 - u) * e[s] * e[u]
                for t in range(1, T + 1) for s in range(1, t + 1) for u in range(s + 1, t + 1)) / T
    return sq, pairs


def test_zero_series_decompositions():
    assert all(v == 0 for v in mse_speed_decomposition(np.zeros(5)))
    assert all(v == 0 for v in mse_position_decomposition(np.zeros(5)))


def test_speed_impulse_T3():
    d = mse_speed_decomposition([0, 1, 0, 0])
    assert d.total == pytest.approx(1.0)
    assert (d.mse_a, d.convolution, d.cross) == pytest.approx((1 / 3, 2 / 3, 0.0))


def test_position_impulse_T2():
    # eps_x = (0, 1, 2): MSE^x = (1 + 4) / 2
    d = mse_position_decomposition([0, 1, 0])
    assert d.total == pytest.approx(2.5)
    assert d.lead == pytest.approx(5 * 0.5)
    assert d.diagonal_correction == pytest.approx(0.0) and d.cross == pytest.approx(0.0)


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12).map(series))
def test_decompositions_match_brute_force_terms(e):
    s = mse_speed_decomposition(e)
    sq, pairs = brute_speed_terms(e)
    assert s.mse_a + s.convolution == pytest.approx(sq, abs=1e-9)
    assert s.cross == pytest.approx(pairs, abs=1e-9)
    p = mse_position_decomposition(e)
    sq, pairs = brute_position_terms(e)
    assert p.lead + p.diagonal_correction == pytest.approx(sq, abs=1e-9)
    assert p.cross == pytest.approx(pairs, abs=1e-9)


@given(error_series)
def test_decomposition_totals(e):
    T = len(e) - 1
    mv = np.mean(speed_error_closed_form(e)[1:] ** 2)
    mx = np.mean(position_error_closed_form(e)[1:] ** 2)
    assert abs(mse_speed_decomposition(e).total - mv) <= 1e-12 * max(1.0, mv)
    assert abs(mse_position_decomposition(e).total - mx) <= 1e-12 * max(1.0, mx)
    assert T >= 1


# -- platoon --------------------------------------------------------------------------------

def test_zero_residuals():
    assert np.all(multi_vehicle_error(np.zeros((4, 11)), FIG4_PARAMS) == 0)


def test_platoon_impulse_grows_down_the_platoon():
    es = platoon_impulse_case(3, 20)
    assert es.eps_a[1, 1] == 5.0
    peak = np.max(np.abs(es.eps_x[1:]), axis=1)
    assert np.all(np.diff(peak) >= 0)


def test_recursion_satisfied():
    rng = np.random.default_rng(2)
    r = rng.normal(size=(5, 40))
    r[:, 0] = 0
    k = LinearParams(-0.2, 0.5, 0.0)
    for conv in ("simulation", "literal"):
        e = multi_vehicle_error(r, k, convention=conv)
        assert recursion_residual(e, r, k, conv) <= 1e-9 * max(1.0, np.max(np.abs(e)))


def test_conventions_differ():
    r = np.zeros((3, 10))
    r[1, 1] = 1.0
    a = multi_vehicle_error(r, FIG4_PARAMS)
    b = multi_vehicle_error(r, FIG4_PARAMS, convention="literal")
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        multi_vehicle_error(r, FIG4_PARAMS, convention="other")


def test_twin_simulation_impulse_case():
    r = np.zeros((4, 21))
    r[1, 1] = 5.0
    d, _ = twin_errors(FIG4_PARAMS, r, np.zeros(21), [15.0, 15.0, 15.0])
    assert np.max(np.abs(d - platoon_impulse_case(3, 20).eps_a)) <= 1e-9


def test_literal_convention_disagrees_with_simulation():
    r = np.zeros((3, 15))
    r[1, 1] = 1.0
    d, _ = twin_errors(FIG4_PARAMS, r, np.zeros(15), [15.0, 15.0])
    assert np.max(np.abs(d - multi_vehicle_error(r, FIG4_PARAMS, convention="literal"))) > 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_twin_simulation_random(seed, head):
    k, r, lead_accel, gaps = random_case(np.random.default_rng(seed), 5, 60, head=head)
    d, _ = twin_errors(k, r, lead_accel, gaps)
    e = multi_vehicle_error(r, k)
    assert np.max(np.abs(d - e)) <= 1e-9 * max(1.0, np.max(np.abs(e)))


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_linearity(seed, c):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=(4, 30))
    r[:, 0] = 0
    e = multi_vehicle_error(r, FIG4_PARAMS)
    np.testing.assert_allclose(multi_vehicle_error(c * r, FIG4_PARAMS), c * e, rtol=1e-12, atol=1e-12)


def test_causality():
    rng = np.random.default_rng(4)
    r = rng.normal(size=(4, 30))
    r[:, 0] = 0
    base = multi_vehicle_error(r, FIG4_PARAMS)
    r2 = r.copy()
    r2[2, 15:] += 3.0  # later residuals of vehicle 2
    r2[3, :] += 1.0  # anything on the last vehicle
    r2[3, 0] = 0
    out = multi_vehicle_error(r2, FIG4_PARAMS)
    np.testing.assert_array_equal(out[:2], base[:2])
    np.testing.assert_array_equal(out[2, :15], base[2, :15])


@pytest.mark.parametrize("n", [2, 3])
def test_first_order_expansion_is_second_order_accurate(n):
    rng = np.random.default_rng(8)
    r = rng.normal(size=(n, 12))
    r[:, 0] = 0
    r[0] = 0
    gaps = []
    for delta in (1e-2, 5e-3):
        k = LinearParams(-0.3 * delta, 0.8 * delta, 0.0)
        gaps.append(np.max(np.abs(first_order_expansion(r, k) - multi_vehicle_error(r, k))))
    # halving the coupling should cut the mismatch by about four
    assert gaps[1] < gaps[0] / 3.0


def test_dt_must_be_one():
    with pytest.raises(ValueError):
        multi_vehicle_error(np.zeros((2, 3)), FIG4_PARAMS, dt=0.1)


# -- figure cases ----------------------------------------------------------------------------

def test_fig2_series(tmp_path):
    es = single_impulse_case()
    p = tmp_path / "fig2.csv"
    write_error_csv(p, es)
    rows = list(csv.DictReader(open(p)))
    assert list(rows[0]) == ["n", "t", "eps_a", "eps_v", "eps_x"]
    for r in rows:
        t = int(r["t"])
        if t >= 5:
            assert float(r["eps_v"]) == 0.2
            assert float(r["eps_x"]) == pytest.approx(0.2 * (t - 4), abs=1e-12)


def test_fig4_case():
    es = figure_case("fig4")
    assert es.eps_a[1, 1] == 5.0 and es.eps_a.shape == (4, 21)
    with pytest.raises(ValueError):
        figure_case("fig3")


def test_propagate_shapes():
    es = propagate(np.zeros((3, 5)), FIG4_PARAMS)
    assert es.eps_v.shape == es.eps_x.shape == (3, 5)
