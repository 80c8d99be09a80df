"""
Brute-force verifier for small window problems.

Every discrete control combination is fixed in turn and the remaining LP is
solved; the best combination is the certified optimum the branch-and-bound
result is checked against.
"""

import itertools
import logging
import math
import time
from dataclasses import dataclass

from controller import build_horizon_problem, extract_action
from solver import solve_lp, solve_milp

log = logging.getLogger(__name__)

DEFAULT_COMBINATION_LIMIT = 1_000_000
ORACLE_TAP_POSITIONS = 5
CERTIFY_REL_TOL = 1e-6


class EnumerationLimitError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnumerationGrid:
    tap_positions: int | None = ORACLE_TAP_POSITIONS
    battery_levels: tuple = ()                   # kW grid for p_cd; empty keeps it continuous
    limit: int = DEFAULT_COMBINATION_LIMIT


def _slots(problem, grid):
    """
    One slot per discrete decision, in lexicographic control order; each
    choice is a list of (handle, value) fixes.
    """
    slots = []
    for k in range(problem.length):
        for reg in problem.regulators:
            u = problem.reg_u[k][reg.edge]
            slots.append([[(h, 1.0 if i == j else 0.0) for i, h in enumerate(u)] for j in range(len(u))])
        for bus in sorted(problem.cap_u[k]):
            h = problem.cap_u[k][bus]
            slots.append([[(h, 0.0)], [(h, 1.0)]])
        bvars = problem.bess
        if bvars is not None:
            if bvars.delta is not None:
                d, b = bvars.delta[k], bvars.beta[k]
                slots.append([[(d, dv), (b, bv)] for dv in (0.0, 1.0) for bv in (0.0, 1.0)])
            if grid.battery_levels:
                h = bvars.p_cd[k]
                slots.append([[(h, float(level))] for level in grid.battery_levels])
    return slots


def count_combinations(problem, grid):
    return math.prod(len(s) for s in _slots(problem, grid))


def enumerate_problem(problem, grid, engine=None):
    """Exhaustive search over a built HorizonProblem."""
    slots = _slots(problem, grid)
    total = math.prod(len(s) for s in slots)
    if total > grid.limit:
        raise EnumerationLimitError(f"{total} combinations exceed the limit of {grid.limit}")

    lb0, ub0 = problem.model.bounds()
    best = None
    feasible = 0
    start = time.perf_counter()
    for combo in itertools.product(*slots):
        lb, ub = lb0.copy(), ub0.copy()
        for choice in combo:
            for h, value in choice:
                lb[h] = ub[h] = value
        sol = solve_lp(problem.model, engine=engine, lb=lb, ub=ub, stage="oracle")
        if not sol.ok:
            continue
        feasible += 1
        if best is None or sol.objective < best.objective - 1e-9 * max(1.0, abs(best.objective)):
            best = sol

    report = {
        "status": "optimal" if best is not None else "infeasible",
        "combinations": total,
        "feasible_combinations": feasible,
        "seconds": time.perf_counter() - start,
        "objective": best.objective if best is not None else None,
        "solution": best,
    }
    if best is not None:
        report["trajectory"] = [extract_action(problem, best, k) for k in range(problem.length)]
        report["action"] = report["trajectory"][0]
    log.info("🔎 Oracle enumerated %d combinations (%d feasible) in %.2fs", total, feasible, report["seconds"])
    return report


def brute_force_schedule(feeder, fleet, profiles, objective, window, grid=None, soc_m=None, price_b=0.0,
                         include_bigm=None, engine=None):
    """
    Best objective and argmin controls of the window (m, W) by enumeration.
    Ties go to the first combination in control order.
    """
    grid = grid or EnumerationGrid()
    m, W = window
    problem = build_horizon_problem(feeder, fleet, profiles, objective, m, W, soc_m=soc_m, price_b=price_b,
                                    tap_positions=grid.tap_positions, include_bigm=include_bigm)
    return enumerate_problem(problem, grid, engine=engine)


def certify_window(feeder, fleet, profiles, objective, m, W, soc_m=None, price_b=0.0, grid=None):
    """Solves one window both ways and reports whether the optima agree."""
    grid = grid or EnumerationGrid()
    problem = build_horizon_problem(feeder, fleet, profiles, objective, m, W, soc_m=soc_m, price_b=price_b,
                                    tap_positions=grid.tap_positions)
    milp_sol = solve_milp(problem.model, stage="certify")
    oracle = enumerate_problem(problem, grid)

    report = {
        "step": m,
        "window": problem.length,
        "objective_kind": objective,
        "tap_positions": grid.tap_positions,
        "combinations": oracle["combinations"],
        "milp_status": milp_sol.status,
        "oracle_status": oracle["status"],
        "milp_objective": milp_sol.objective if milp_sol.ok else None,
        "oracle_objective": oracle["objective"],
        "milp_nodes": milp_sol.stats.get("nodes", 0),
    }
    if milp_sol.ok and oracle["status"] == "optimal":
        rel = abs(milp_sol.objective - oracle["objective"]) / max(1.0, abs(oracle["objective"]))
        report["rel_error"] = rel
        report["certified"] = rel <= CERTIFY_REL_TOL
    else:
        report["rel_error"] = None
        report["certified"] = milp_sol.status == oracle["status"] == "infeasible"
    if not report["certified"]:
        log.warning("⚠️ Window at step %d not certified: milp=%s oracle=%s", m,
                    report["milp_objective"], report["oracle_objective"])
    return report
