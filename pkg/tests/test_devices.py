import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devices import (
    V_MAX,
    V_MIN,
    CapBank,
    InfeasibleProfileError,
    Regulator,
    capacitor_constraints,
    cvr_load_eval,
    inverter_q_bounds,
    product_envelope,
    reduced_taps,
    regulator_constraints,
    tap_ratio_table,
)
from milp import MilpModel
from solver import solve_lp


def test_tap_ratio_table_endpoints():
    table = dict(tap_ratio_table(Regulator(edge=0)))
    assert len(table) == 33
    assert table[0] == 1.0
    assert table[16] == pytest.approx(1.1 ** 2)
    assert table[-16] == pytest.approx(0.9 ** 2)
    assert table[-8] == pytest.approx(0.9025)


def test_reduced_taps_keeps_zero():
    reg = Regulator(edge=0)
    assert reduced_taps(reg, 9).taps == (-16, -12, -8, -4, 0, 4, 8, 12, 16)
    assert reduced_taps(reg, 5).taps == (-16, -8, 0, 8, 16)
    assert reduced_taps(reg, 1).taps == (0,)
    assert reduced_taps(reg, None) is reg
    assert reduced_taps(reg, 40) is reg


def _regulator_model(reg, v_i_value):
    model = MilpModel()
    v_i = model.add_variable("vi", v_i_value, v_i_value)
    v_j = model.add_variable("vj", 0.0, 2.0)
    u = [model.add_variable(f"u{k}", 0.0, 1.0, binary=True) for k in range(len(reg.taps))]
    w = [model.add_variable(f"w{k}", 0.0, V_MAX) for k in range(len(reg.taps))]
    regulator_constraints(reg, 0, model, v_i, v_j, u, w)
    model.set_objective({v_j: 1.0})
    return model, v_j, u


@pytest.mark.parametrize("engine", ["highs", "simplex"])
@pytest.mark.parametrize("index", [0, 2, 4])
def test_regulator_is_exact_for_fixed_tap(engine, index):
    reg = reduced_taps(Regulator(edge=0), 5)
    model, v_j, u = _regulator_model(reg, 1.0)
    lb, ub = model.bounds()
    for k, h in enumerate(u):
        lb[h] = ub[h] = 1.0 if k == index else 0.0
    sol = solve_lp(model, engine=engine, lb=lb, ub=ub)
    assert sol.ok
    assert sol[v_j] == pytest.approx(reg.B[index] * 1.0, abs=1e-9)


def test_regulator_registers_one_hot_group():
    reg = reduced_taps(Regulator(edge=3), 3)
    model, _, u = _regulator_model(reg, 1.0)
    assert model.one_hot_groups == [tuple(u)]
    # one-hot row + 4 envelope rows per tap + ratio row
    assert len(model.constraints) == 1 + 4 * 3 + 1


@pytest.mark.parametrize("on", [0, 1])
def test_capacitor_output_is_exact(on):
    cap = CapBank(bus=2, q_rated=0.1)
    model = MilpModel()
    v = model.add_variable("v", 1.05, 1.05)
    u = model.add_variable("u", on, on, binary=True)
    q = model.add_variable("q", 0.0, cap.q_rated * V_MAX)
    capacitor_constraints(cap, 0, model, v, u, q)
    for sign in (1.0, -1.0):
        model.set_objective({q: sign})
        sol = solve_lp(model)
        assert sol[q] == pytest.approx(0.1 * on * 1.05, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(u=st.sampled_from([0.0, 1.0]), v=st.floats(min_value=V_MIN, max_value=V_MAX),
       offset=st.floats(min_value=1e-6, max_value=0.2))
def test_envelope_pins_the_product(u, v, offset):
    model = MilpModel()
    w_h = model.add_variable("w", -1.0, 2.0)
    u_h = model.add_variable("u", 0.0, 1.0, binary=True)
    v_h = model.add_variable("v", V_MIN, V_MAX)
    product_envelope(model, w_h, u_h, v_h)
    point = np.array([u * v, u, v])
    assert model.max_violation(point) <= 1e-12
    for w in (u * v + offset, u * v - offset):
        point[0] = w
        assert model.max_violation(point) > 1e-9


def test_inverter_bounds():
    lo, hi = inverter_q_bounds(0.115, 0.1)
    assert hi == pytest.approx(math.sqrt(0.115 ** 2 - 0.1 ** 2))
    assert hi == pytest.approx(0.05679, abs=1e-5)
    assert lo == -hi
    assert inverter_q_bounds(0.115, 0.115) == (-0.0, 0.0)


def test_inverter_over_rating():
    with pytest.raises(InfeasibleProfileError):
        inverter_q_bounds(0.115, 0.2)


@settings(max_examples=80, deadline=None)
@given(s=st.floats(min_value=0.01, max_value=2.0), frac=st.floats(min_value=0.0, max_value=1.0))
def test_inverter_bounds_are_symmetric(s, frac):
    lo, hi = inverter_q_bounds(s, s * frac)
    assert lo == -hi
    assert hi >= 0.0
    assert hi ** 2 + (s * frac) ** 2 == pytest.approx(s ** 2, rel=1e-9, abs=1e-12)


def test_cvr_load_values():
    p, q = cvr_load_eval(1.0, 1.0, 0.6, 3.0, 0.9025)
    assert p == pytest.approx(0.97075)
    assert q == pytest.approx(0.85375)
    assert cvr_load_eval(1.0, 0.5, 0.6, 3.0, 1.0) == (1.0, 0.5)


@settings(max_examples=80, deadline=None)
@given(p0=st.floats(min_value=0.0, max_value=2.0), cp=st.floats(min_value=0.0, max_value=3.0),
       v1=st.floats(min_value=V_MIN, max_value=V_MAX), v2=st.floats(min_value=V_MIN, max_value=V_MAX))
def test_cvr_load_is_monotone_in_voltage(p0, cp, v1, v2):
    lo, hi = sorted((v1, v2))
    p_lo, _ = cvr_load_eval(p0, 0.0, cp, 0.0, lo)
    p_hi, _ = cvr_load_eval(p0, 0.0, cp, 0.0, hi)
    assert p_lo <= p_hi + 1e-15
    # stays positive inside the band for cvr_p up to 3
    assert p_lo >= 0.0
