import math

import numpy as np
import pytest
from scipy.optimize import Bounds, LinearConstraint, milp

from controller import build_horizon_problem
from milp import MilpModel, ModelError, export_interchange
from solver import solve_milp


def parse_lp(path):
    """Minimal reader for the files export_interchange writes."""
    with open(path, encoding="utf-8") as f:
        raw = f.read().splitlines()
    lines = []
    for line in raw:
        if line.startswith("   ") and lines:
            lines[-1] += " " + line.strip()
        else:
            lines.append(line)

    def terms(text):
        tokens = text.split()
        out, sign, k = {}, 1.0, 0
        while k < len(tokens):
            tok = tokens[k]
            if tok in "+-":
                sign = -1.0 if tok == "-" else 1.0
                k += 1
                continue
            out[tokens[k + 1]] = out.get(tokens[k + 1], 0.0) + sign * float(tok)
            sign = 1.0
            k += 2
        return out

    section = None
    objective, rows, bounds, binaries = {}, [], {}, set()
    for line in lines:
        text = line.strip()
        if text.startswith("\\") or not text:
            continue
        if text in ("Minimize", "Subject To", "Bounds", "Binaries", "End"):
            section = text
            continue
        if section == "Minimize":
            objective = terms(text.split(":", 1)[1])
        elif section == "Subject To":
            body = text.split(":", 1)[1]
            for sense in ("<=", ">=", "="):
                if f" {sense} " in body:
                    lhs, rhs = body.rsplit(f" {sense} ", 1)
                    rows.append((terms(lhs), sense, float(rhs)))
                    break
        elif section == "Bounds":
            parts = text.split()
            if parts[1] == "free":
                bounds[parts[0]] = (-math.inf, math.inf)
            elif parts[1] == "=":
                bounds[parts[0]] = (float(parts[2]), float(parts[2]))
            else:
                bounds[parts[2]] = (float(parts[0]), float(parts[4]))
        elif section == "Binaries":
            binaries.update(text.split())
    return objective, rows, bounds, binaries


def solve_parsed(parsed):
    objective, rows, bounds, binaries = parsed
    names = list(bounds)
    col = {n: j for j, n in enumerate(names)}
    c = np.zeros(len(names))
    for n, a in objective.items():
        c[col[n]] = a
    A = np.zeros((len(rows), len(names)))
    lo, hi = np.empty(len(rows)), np.empty(len(rows))
    for i, (coeffs, sense, rhs) in enumerate(rows):
        for n, a in coeffs.items():
            A[i, col[n]] = a
        lo[i] = rhs if sense in (">=", "=") else -np.inf
        hi[i] = rhs if sense in ("<=", "=") else np.inf
    integrality = np.array([1 if n in binaries else 0 for n in names])
    res = milp(c, constraints=[LinearConstraint(A, lo, hi)], integrality=integrality,
               bounds=Bounds([bounds[n][0] for n in names], [bounds[n][1] for n in names]),
               options={"mip_rel_gap": 1e-9})
    return res


def test_duplicate_variable_name():
    model = MilpModel()
    model.add_variable("x")
    with pytest.raises(ModelError, match="duplicate"):
        model.add_variable("x")


@pytest.mark.parametrize("kwargs", [{"lb": 2.0, "ub": 1.0}, {"lb": 0.0, "ub": 2.0, "binary": True}])
def test_bad_bounds(kwargs):
    with pytest.raises(ModelError):
        MilpModel().add_variable("x", **kwargs)


def test_constraint_errors():
    model = MilpModel()
    x = model.add_variable("x")
    with pytest.raises(ModelError, match="unknown variable handle"):
        model.add_constraint({x + 1: 1.0}, "<=", 1.0)
    with pytest.raises(ModelError, match="no terms"):
        model.add_constraint({x: 0.0}, "<=", 1.0)
    with pytest.raises(ModelError, match="sense"):
        model.add_constraint({x: 1.0}, "<", 1.0)
    with pytest.raises(ModelError, match="non-finite"):
        model.add_constraint({x: math.nan}, "<=", 1.0)
    with pytest.raises(ModelError):
        model.set_objective({x: 1.0}, sense="maximize")


def test_one_hot_requires_binaries():
    model = MilpModel()
    x = model.add_variable("x", 0.0, 1.0)
    with pytest.raises(ModelError, match="not binary"):
        model.add_one_hot([x])


def test_matrices_negate_ge_rows():
    model = MilpModel()
    x = model.add_variable("x")
    y = model.add_variable("y")
    model.add_constraint({x: 1.0, y: 2.0}, ">=", 3.0)
    model.add_constraint({x: 1.0}, "=", 1.0)
    A_ub, b_ub, A_eq, b_eq = model.matrices()
    assert A_ub.toarray().tolist() == [[-1.0, -2.0]]
    assert b_ub.tolist() == [-3.0]
    assert A_eq.toarray().tolist() == [[1.0, 0.0]]
    assert model.max_violation([1.0, 0.5]) == pytest.approx(1.0)
    assert model.max_violation([1.0, 1.0]) == 0.0


def test_export_layout(tmp_path):
    model = MilpModel("tiny")
    x = model.add_variable("x", 0.0, 4.0)
    y = model.add_variable("y", -math.inf, math.inf)
    z = model.add_variable("z-1", 0.0, 1.0, binary=True)
    f = model.add_variable("f", 2.0, 2.0)
    model.add_constraint({x: 1.0, y: -1.0, z: 2.5}, "<=", 3.0, name="cap[1]")
    model.add_constraint({y: 1.0, f: 1.0}, ">=", -1.0)
    model.set_objective({x: 1.0, y: -0.5})
    path = export_interchange(model, str(tmp_path / "tiny.lp"))
    text = open(path, encoding="utf-8").read().splitlines()
    assert text == [
        "\\ Problem: tiny",
        "Minimize",
        " obj: 1.0 x - 0.5 y",
        "Subject To",
        " c0_cap_1_: 1.0 x - 1.0 y + 2.5 z_1 <= 3.0",
        " c1: 1.0 y + 1.0 f >= -1.0",
        "Bounds",
        " 0.0 <= x <= 4.0",
        " y free",
        " 0.0 <= z_1 <= 1.0",
        " f = 2.0",
        "Binaries",
        " z_1",
        "End",
    ]


def test_long_rows_wrap(tmp_path):
    model = MilpModel("wide")
    xs = [model.add_variable(f"x{k}") for k in range(14)]
    model.add_constraint({h: 1.0 for h in xs}, "<=", 1.0)
    model.set_objective({h: -1.0 for h in xs})
    path = export_interchange(model, str(tmp_path / "wide.lp"))
    lines = open(path, encoding="utf-8").read().splitlines()
    start = lines.index("Subject To")
    assert lines[start + 2].startswith("   + 1.0 x6")
    objective, rows, _, _ = parse_lp(path)
    assert len(rows[0][0]) == 14
    assert objective == {f"x{k}": -1.0 for k in range(14)}


def test_export_round_trip(tmp_path, feeder4, make_profiles):
    feeder, fleet = feeder4
    profiles = make_profiles([0.8, 1.0], [10.0, 50.0], pv={"pv_3": [40.0, 60.0]})
    problem = build_horizon_problem(feeder, fleet, profiles, "revenue", 0, 2, tap_positions=3)
    model = problem.model
    path = export_interchange(model, str(tmp_path / f"{model.name}.lp"))
    objective, rows, bounds, binaries = parse_lp(path)
    assert len(rows) == len(model.constraints)
    assert len(bounds) == model.num_variables
    assert len(binaries) == len(model.binaries)
    for (coeffs, sense, rhs), con in zip(rows, model.constraints):
        assert sense == con.sense
        assert rhs == con.rhs
        assert sorted(coeffs.values()) == sorted(con.coeffs.values())


def test_external_solver_agrees_with_branch_and_bound(tmp_path, feeder4, make_profiles):
    feeder, fleet = feeder4
    profiles = make_profiles([0.9], [20.0], pv={"pv_3": [50.0]})
    problem = build_horizon_problem(feeder, fleet, profiles, "energy", 0, 1, tap_positions=5)
    path = export_interchange(problem.model, str(tmp_path / "window.lp"))
    res = solve_parsed(parse_lp(path))
    ours = solve_milp(problem.model)
    assert res.status == 0 and ours.ok
    assert abs(res.fun - ours.objective) <= 1e-6 * max(1.0, abs(ours.objective))
