import math

import numpy as np
import pytest

from controller import ControlAction
from feeder import parse_feeder
from milp import MilpModel
from powerflow import (
    ConvergenceError,
    Injections,
    StepVars,
    build_injections,
    compare_pf,
    linear_pf_constraints,
    solve_linear,
    solve_nonlinear_sweep,
)
from profiles import load_profiles
from tests.conftest import data_path


def _chain_feeder(n, p=0.1, q=0.05, r=0.01, x=0.02):
    doc = {
        "base": {"s_base_kva": 1000.0, "v_base_kv": 4.16},
        "buses": [{"id": 0, "kind": "substation"}]
        + [{"id": i, "kind": "load", "p0_pu": p, "q0_pu": q} for i in range(1, n)],
        "edges": [{"from": i, "to": i + 1, "r_pu": r, "x_pu": x} for i in range(n - 1)],
    }
    return parse_feeder(doc)


def test_two_bus_linear(feeder2):
    feeder, fleet = feeder2
    sol = solve_linear(feeder, build_injections(feeder, fleet))
    assert sol.P[0] == pytest.approx(0.1, abs=1e-12)
    assert sol.Q[0] == pytest.approx(0.05, abs=1e-12)
    assert sol.v[1] == pytest.approx(0.996, abs=1e-12)
    assert sol.l[0] == 0.0


def test_zero_load_is_flat(feeder13):
    feeder, fleet = feeder13
    inj = build_injections(feeder, fleet, load_mult=0.0)
    lin = solve_linear(feeder, inj)
    nl = solve_nonlinear_sweep(feeder, inj)
    assert nl.iterations == 1
    for bus in lin.v:
        assert lin.v[bus] == pytest.approx(feeder.v0, abs=1e-12)
        assert nl.v[bus] == pytest.approx(feeder.v0, abs=1e-12)
    assert all(abs(p) < 1e-15 for p in nl.P.values())
    assert all(l == 0.0 for l in nl.l.values())


def test_chain_voltages_decrease():
    feeder, fleet = _chain_feeder(4)
    sol = solve_linear(feeder, build_injections(feeder, fleet))
    assert sol.v[0] > sol.v[1] > sol.v[2] > sol.v[3]


def test_linear_residuals(feeder13):
    feeder, fleet = feeder13
    inj = build_injections(feeder, fleet, load_mult=1.0)
    sol = solve_linear(feeder, inj)
    for bus in feeder.topology["order"][1:]:
        k = feeder.parent_edge(bus)
        p, q = inj.net_load(bus, sol.v[bus])
        downstream_p = sum(sol.P[c] for c in feeder.child_edges(bus))
        downstream_q = sum(sol.Q[c] for c in feeder.child_edges(bus))
        assert abs(sol.P[k] - p - downstream_p) < 1e-12
        assert abs(sol.Q[k] - q - downstream_q) < 1e-12
        e = feeder.edges[k]
        if e.kind == "line":
            drop = sol.v[e.from_bus] - 2 * (e.r * sol.P[k] + e.x * sol.Q[k])
            assert abs(sol.v[bus] - drop) < 1e-12


def test_two_bus_nonlinear_fixed_point(feeder2):
    feeder, fleet = feeder2
    inj = build_injections(feeder, fleet)
    sol = solve_nonlinear_sweep(feeder, inj, tol=1e-12)
    assert sol.v[1] == pytest.approx(0.9959937, abs=1e-6)
    assert abs(sol.v[1] - 0.996) < 1e-4
    residual = sol.v[0] * sol.l[0] - sol.P[0] ** 2 - sol.Q[0] ** 2
    assert abs(residual) < 1e-12


def test_branch_flow_residual_and_losses(feeder13):
    feeder, fleet = feeder13
    inj = build_injections(feeder, fleet, load_mult=1.0)
    sol = solve_nonlinear_sweep(feeder, inj)
    for k, e in enumerate(feeder.edges):
        assert abs(sol.v[e.from_bus] * sol.l[k] - sol.P[k] ** 2 - sol.Q[k] ** 2) < 1e-8
    losses = sum(e.r * sol.l[k] for k, e in enumerate(feeder.edges))
    assert losses >= 0.0
    total_load = sum(inj.net_load(b, sol.v[b])[0] for b in sol.v if b != feeder.root)
    P_s, _ = sol.substation_injection(feeder)
    assert P_s >= total_load


def test_regulator_ratio_applies(feeder4):
    feeder, fleet = feeder4
    action = ControlAction(tap={0: -8}, cap={2: 0}, q_dg={3: 0.0})
    inj = build_injections(feeder, fleet, load_mult=0.5, action=action)
    assert inj.ratio[0] == pytest.approx(0.95 ** 2)
    for solve in (solve_linear, solve_nonlinear_sweep):
        sol = solve(feeder, inj)
        assert sol.v[1] == pytest.approx(0.9025 * sol.v[0], rel=1e-12)
        assert sol.P[0] == pytest.approx(sol.P[1], rel=1e-12)


def test_capacitor_is_voltage_dependent(feeder4):
    feeder, fleet = feeder4
    action = ControlAction(tap={0: 0}, cap={2: 1}, q_dg={3: 0.0})
    inj = build_injections(feeder, fleet, load_mult=0.0, action=action)
    sol = solve_linear(feeder, inj)
    # bus 2 injects q_rated * v2 and nothing else flows
    assert sol.Q[1] == pytest.approx(-0.1 * sol.v[2], rel=1e-12)


def test_divergence_reports_trace():
    feeder, fleet = _chain_feeder(3, p=3.0, q=3.0, r=0.05, x=0.1)
    with pytest.raises(ConvergenceError) as exc:
        solve_nonlinear_sweep(feeder, build_injections(feeder, fleet), max_iter=50)
    assert exc.value.trace


def test_nonpositive_tolerance_rejected(feeder2):
    feeder, fleet = feeder2
    with pytest.raises(ValueError):
        solve_nonlinear_sweep(feeder, build_injections(feeder, fleet), tol=0.0)


def test_compare_two_bus(feeder2):
    feeder, fleet = feeder2
    report = compare_pf(feeder, build_injections(feeder, fleet))
    assert report["max_error"] < 1e-3
    assert report["mean_error"] <= report["max_error"]


def test_compare_zero_load(feeder4):
    feeder, fleet = feeder4
    assert compare_pf(feeder, build_injections(feeder, fleet, load_mult=0.0))["max_error"] <= 1e-12


@pytest.mark.parametrize("name", ["2bus", "4bus", "13bus"])
def test_linearization_error_over_day(name):
    from feeder import load_feeder

    feeder, fleet = load_feeder(data_path(f"feeder_{name}.json"))
    profiles = load_profiles(data_path(f"profiles_{name}.csv"))
    worst = 0.0
    for t in range(profiles.steps):
        pv = {dg.bus: profiles.pv_kw(dg, t) for dg in fleet.dgs}
        inj = build_injections(feeder, fleet, load_mult=float(profiles.load_mult[t]), pv_kw=pv)
        worst = max(worst, compare_pf(feeder, inj)["max_error"])
    assert worst <= 0.005


def test_error_grows_with_loading(feeder13):
    feeder, fleet = feeder13
    errors = [compare_pf(feeder, build_injections(feeder, fleet, load_mult=m))["max_error"]
              for m in np.linspace(0.2, 1.0, 5)]
    assert all(b > a for a, b in zip(errors, errors[1:]))


def _step_vars(feeder, model, p_dg=None):
    v = {b.id: model.add_variable(f"v{b.id}", 0.9, 1.1) for b in feeder.buses}
    P = {k: model.add_variable(f"P{k}", -math.inf, math.inf) for k in range(len(feeder.edges))}
    Q = {k: model.add_variable(f"Q{k}", -math.inf, math.inf) for k in range(len(feeder.edges))}
    loads = [b.id for b in feeder.buses if b.has_load]
    p_l = {b: model.add_variable(f"pL{b}") for b in loads}
    q_l = {b: model.add_variable(f"qL{b}") for b in loads}
    return StepVars(v=v, P=P, Q=Q, p_l=p_l, q_l=q_l, q_dg={}, q_c={}, p_dg=p_dg or {})


def test_two_bus_constraint_block(feeder2):
    feeder, _ = feeder2
    model = MilpModel()
    svars = _step_vars(feeder, model)
    rows = linear_pf_constraints(feeder, 0, model, svars)
    assert len(rows) == 3
    vdrop = model.constraints[rows[2]]
    assert vdrop.coeffs == {svars.v[1]: 1.0, svars.v[0]: -1.0, svars.P[0]: 0.02, svars.Q[0]: 0.04}


def test_four_bus_chain_constraint_count():
    feeder, _ = _chain_feeder(4)
    model = MilpModel()
    assert len(linear_pf_constraints(feeder, 0, model, _step_vars(feeder, model))) == 9


def test_regulator_edge_skipped(feeder4):
    feeder, _ = feeder4
    model = MilpModel()
    assert len(linear_pf_constraints(feeder, 0, model, _step_vars(feeder, model))) == 8


def test_branching_bus_balance():
    doc = {
        "base": {"s_base_kva": 1000.0, "v_base_kv": 4.16},
        "buses": [{"id": 0, "kind": "substation"}, {"id": 1, "kind": "junction"},
                  {"id": 2, "kind": "load", "p0_pu": 0.1}, {"id": 3, "kind": "load", "p0_pu": 0.1}],
        "edges": [{"from": 0, "to": 1, "r_pu": 0.01, "x_pu": 0.01},
                  {"from": 1, "to": 2, "r_pu": 0.01, "x_pu": 0.01},
                  {"from": 1, "to": 3, "r_pu": 0.01, "x_pu": 0.01}],
    }
    feeder, _ = parse_feeder(doc)
    model = MilpModel()
    svars = _step_vars(feeder, model)
    rows = linear_pf_constraints(feeder, 0, model, svars)
    balance = model.constraints[rows[0]]
    assert balance.coeffs == {svars.P[0]: 1.0, svars.P[1]: -1.0, svars.P[2]: -1.0}
    assert balance.rhs == 0.0


def test_dg_output_enters_as_negative_load(feeder2):
    feeder, _ = feeder2
    model = MilpModel()
    svars = _step_vars(feeder, model, p_dg={1: 0.03})
    rows = linear_pf_constraints(feeder, 0, model, svars)
    assert model.constraints[rows[0]].rhs == -0.03


def test_injections_defaults_are_neutral(feeder4):
    feeder, fleet = feeder4
    inj = build_injections(feeder, fleet)
    assert isinstance(inj, Injections)
    assert inj.ratio == {0: 1.0}
    assert inj.cap == {2: 0.0}
    assert inj.q_dg == {3: 0.0}
