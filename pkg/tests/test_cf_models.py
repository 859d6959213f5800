import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfcal.cf_models import (CFState, FVDParams, IDMParams, LinearParams, ModelSpec, fvd_accel, idm_accel,
                             idm_desired_gap, linear_accel, load_param_file, model_kind, optimal_velocity,
                             table4_spec, write_param_file)

MIC_LIN = LinearParams(-0.053, 0.284, 0.918)
MIC_FVD = FVDParams(0.101, 0.001, 30.031, 10.8, 7.736)
BIC_IDM = IDMParams(17.301, 1.256, 3.062, 5.97, 2.261)

finite = st.floats(-1e3, 1e3)


# -- linear ---------------------------------------------------------------------------

def test_linear_constant_law():
    assert linear_accel(CFState(12.0, 33.0, -4.0), LinearParams(0, 0, 0.5)) == 0.5


def test_linear_table_value():
    # signed spacing -20 m: -0.053 * -20 + 0.918
    assert linear_accel(CFState(0.0, 20.0, 0.0), MIC_LIN) == pytest.approx(1.978, abs=1e-12)


def test_linear_zero_state():
    assert linear_accel(CFState(0.0, 0.0, 0.0), LinearParams(1, 1, 0)) == 0


@given(finite, finite, finite, finite, st.floats(0, 1))
def test_linear_is_affine(g1, g2, d1, d2, alpha):
    p = LinearParams(-0.3, 0.7, 1.1)
    mix = linear_accel(CFState(0, alpha * g1 + (1 - alpha) * g2, alpha * d1 + (1 - alpha) * d2), p)
    lhs = alpha * linear_accel(CFState(0, g1, d1), p) + (1 - alpha) * linear_accel(CFState(0, g2, d2), p)
    assert mix == pytest.approx(lhs, rel=1e-9, abs=1e-9)


# -- FVD -----------------------------------------------------------------------------

def test_optimal_velocity_limits():
    p = MIC_FVD
    assert optimal_velocity(1e9, 0.0, p) == pytest.approx(p.V0 / 2 * (1 + np.tanh(p.beta)))
    assert optimal_velocity(5.0 + p.b * p.beta, 5.0, p) == pytest.approx(p.V0 / 2 * np.tanh(p.beta))


def test_optimal_velocity_desk_value():
    # 15.0155 * (tanh(50/10.8 - 7.736) + tanh(7.736))
    assert optimal_velocity(55.0, 5.0, MIC_FVD) == pytest.approx(0.06004819952455154, rel=1e-12)


def test_fvd_equilibrium_and_pure_relative_term():
    v = optimal_velocity(80.0, 5.0, MIC_FVD)
    assert fvd_accel(CFState(v, 80.0, 0.0, 5.0), MIC_FVD) == 0.0
    assert fvd_accel(CFState(3.0, 20.0, 2.0), FVDParams(0, 1, 30, 10, 2)) == 2.0


def test_fvd_desk_value():
    assert fvd_accel(CFState(10.0, 30.0, -1.0, 5.0), MIC_FVD) == pytest.approx(-1.0109412724139908, rel=1e-12)


@given(st.floats(0, 200), st.floats(0, 10))
def test_fvd_exact_equilibrium_property(gap, L):
    v = optimal_velocity(gap, L, MIC_FVD)
    assert fvd_accel(CFState(v, gap, 0.0, L), MIC_FVD) == 0.0


# -- IDM ------------------------------------------------------------------------------

def test_desired_gap_cases():
    assert idm_desired_gap(0.0, -3.0, BIC_IDM) == BIC_IDM.S0
    p = IDMParams(30, 1, 2, 2.0, 1.5)
    assert idm_desired_gap(10.0, 0.0, p) == pytest.approx(17.0)
    assert idm_desired_gap(5.0, -1.0, BIC_IDM) == pytest.approx(18.549801587984113, rel=1e-12)


def test_idm_desk_value():
    assert idm_accel(CFState(10.0, 40.0, 0.0), BIC_IDM) == pytest.approx(0.4746130708324497, rel=1e-12)


def test_idm_limits():
    assert idm_accel(CFState(0.0, 1e9, 0.0), BIC_IDM) == pytest.approx(BIC_IDM.a_max)
    p = IDMParams(15.0, 1.0, 2.0, 2.0, 1.0)  # desired gap 17 m at v_f
    for gap in (1e6, 1e8):
        assert abs(idm_accel(CFState(p.v_f, gap, 0.0), p)) < 1e-9
    # in general the residual is exactly the interaction term
    s_star = BIC_IDM.S0 + BIC_IDM.t0 * BIC_IDM.v_f
    got = idm_accel(CFState(BIC_IDM.v_f, 1e6, 0.0), BIC_IDM)
    assert got == pytest.approx(-BIC_IDM.a_max * (s_star / 1e6) ** 2, rel=1e-6)


def test_idm_rejects_nonpositive_gap():
    with pytest.raises(ValueError):
        idm_accel(CFState(5.0, 0.0, 0.0), BIC_IDM)


def test_idm_protected_sqrt_at_degenerate_bounds():
    p = IDMParams(20, 0.0, 0.0, 2, 1)
    assert np.isfinite(idm_desired_gap(10.0, -1.0, p))


def test_idm_increasing_in_gap_on_grid():
    v, dv, gap = np.meshgrid(np.linspace(0, 25, 11), np.linspace(-5, 5, 11), np.linspace(1, 150, 60),
                             indexing="ij")
    s = idm_desired_gap(v, dv, BIC_IDM)
    h = 1e-4
    d = (idm_accel(CFState(v, gap + h, dv), BIC_IDM) - idm_accel(CFState(v, gap, dv), BIC_IDM)) / h
    assert np.all(d[s > 0] > 0)


# -- determinism and specs ---------------------------------------------------------------

@given(st.floats(0, 40), st.floats(0.1, 200), st.floats(-10, 10))
def test_laws_deterministic(v, gap, dv):
    s = CFState(v, gap, dv, 4.5)
    for f, p in ((linear_accel, MIC_LIN), (fvd_accel, MIC_FVD), (idm_accel, BIC_IDM)):
        assert f(s, p) == f(s, p)


def test_table4_has_all_methods_and_models():
    t = load_param_file()
    assert set(t) == {"MiC", "MaC", "BiC"}
    for m in t.values():
        assert set(m) == {"Linear", "FVD", "IDM"}
    assert table4_spec("BiC", "idm").for_class("small") == BIC_IDM


def test_model_spec_requires_both_classes():
    with pytest.raises(ValueError):
        ModelSpec("IDM", {"small": BIC_IDM})
    with pytest.raises(ValueError):
        ModelSpec.uniform("IDM", BIC_IDM, gap_semantics="rear")
    with pytest.raises(ValueError):
        model_kind("Gipps")


def test_param_file_roundtrip(tmp_path):
    spec = table4_spec("MaC", "FVD")
    p = tmp_path / "p.yaml"
    write_param_file(p, "fit", spec)
    assert load_param_file(p)["fit"]["FVD"] == spec.params
