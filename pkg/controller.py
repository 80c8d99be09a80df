"""
Receding-horizon Volt-VAr / CVR controller.

Each step builds the window MILP (network, devices, battery, objective),
solves it, applies the first control of the window to the nonlinear plant,
and feeds the measured state back into the next window.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field

from bess import bess_constraints, soc_update
from devices import (
    V_MAX,
    V_MIN,
    capacitor_constraints,
    cvr_load_constraints,
    inverter_q_bounds,
    reduced_taps,
    regulator_constraints,
)
from milp import MilpModel, export_interchange
from powerflow import ConvergenceError, StepVars, build_injections, linear_pf_constraints, solve_nonlinear_sweep
from profiles import noisy_load_mult
from solver import InfeasibleError, SolverLimitError, UnboundedError, require_optimal, solve_external, solve_milp

log = logging.getLogger(__name__)

OBJECTIVES = ("energy", "revenue")
SOLVERS = ("builtin", "export")

DEFAULT_WINDOW = 8
BUILTIN_TAP_POSITIONS = 9
TIE_WEIGHT = 1e-6
SNAP_KW = 1e-7
SNAP_PU = 1e-10


class StepError(RuntimeError):
    """A window failed to solve; carries the step index and the model dump."""

    def __init__(self, step, status, dump_path=None, cause=None):
        where = f", model written to {dump_path}" if dump_path else ""
        super().__init__(f"step {step}: window problem {status}{where}")
        self.step = step
        self.status = status
        self.dump_path = dump_path
        self.cause = cause

    @property
    def exit_code(self):
        return 3 if isinstance(self.cause, SolverLimitError) else 1


@dataclass(frozen=True)
class ControlAction:
    tap: dict = field(default_factory=dict)      # regulator edge -> tap position
    cap: dict = field(default_factory=dict)      # capacitor bus -> 0/1
    q_dg: dict = field(default_factory=dict)     # DG bus -> per-unit reactive setpoint
    p_cd: float = 0.0                            # kW, + charge / - discharge

    @property
    def p_d(self):
        return max(0.0, -self.p_cd)


@dataclass
class HorizonProblem:
    model: MilpModel
    m: int
    length: int
    objective: str
    regulators: tuple
    steps: list                                  # StepVars per window offset
    reg_u: list                                  # [{edge: [u handles]}]
    cap_u: list                                  # [{bus: u handle}]
    p_s: list
    p_t: list
    bess: object = None
    q_abs: list = field(default_factory=list)


def build_horizon_problem(feeder, fleet, profiles, objective, m, W, soc_m=None, price_b=0.0,
                          tap_positions=None, include_bigm=None, terminal_soc=False):
    """
    Window MILP over steps m..m+W-1 (clipped to the end of the day).

    Energy objective: total purchased kWh. Revenue objective: purchase cost
    plus the depreciation price on discharged kWh. Both carry a small
    minimal-cycling / minimal-VAr term so that the optimum is unique.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}, expected one of {OBJECTIVES}")
    if W < 1:
        raise ValueError("window length must be at least 1")
    length = profiles.window_length(m, W)
    if include_bigm is None:
        include_bigm = objective == "revenue"

    battery = fleet.battery
    if battery is not None and soc_m is not None:
        if not battery.e_minus - 1e-9 <= soc_m <= battery.e_plus + 1e-9:
            raise ValueError(f"window SOC {soc_m} outside [{battery.e_minus}, {battery.e_plus}]")
        soc_m = min(max(soc_m, battery.e_minus), battery.e_plus)

    model = MilpModel(name=f"{feeder.name}_{objective}_t{m}_w{length}")
    regulators = tuple(reduced_taps(r, tap_positions) for r in fleet.regulators)
    order = feeder.topology["order"]
    tau = profiles.tau

    steps, reg_u, cap_u, p_s, q_abs = [], [], [], [], []
    for k in range(length):
        t = m + k
        mult = float(profiles.load_mult[t])

        v = {}
        for bus in order:
            if bus == feeder.root:
                v[bus] = model.add_variable(f"v{bus}_t{t}", feeder.v0, feeder.v0)
            else:
                v[bus] = model.add_variable(f"v{bus}_t{t}", V_MIN, V_MAX)
        P = {e: model.add_variable(f"P{e}_t{t}", -math.inf, math.inf) for e in range(len(feeder.edges))}
        Q = {e: model.add_variable(f"Q{e}_t{t}", -math.inf, math.inf) for e in range(len(feeder.edges))}

        p_l, q_l = {}, {}
        for bus in feeder.buses:
            if not bus.has_load:
                continue
            p_l[bus.id] = model.add_variable(f"pL{bus.id}_t{t}", -math.inf, math.inf)
            q_l[bus.id] = model.add_variable(f"qL{bus.id}_t{t}", -math.inf, math.inf)
            cvr_load_constraints(bus, t, model, v[bus.id], p_l[bus.id], q_l[bus.id], mult=mult)

        q_dg, p_dg = {}, {}
        for dg in fleet.dgs:
            p_dg[dg.bus] = profiles.pv_kw(dg, t) / feeder.s_base
            q_lo, q_hi = inverter_q_bounds(dg.s_rated, p_dg[dg.bus])
            q_dg[dg.bus] = model.add_variable(f"qDG{dg.bus}_t{t}", q_lo, q_hi)
            a = model.add_variable(f"qDGabs{dg.bus}_t{t}", 0.0, q_hi)
            model.add_constraint({a: 1.0, q_dg[dg.bus]: -1.0}, ">=", 0.0, name=f"qabs_pos{dg.bus}_t{t}")
            model.add_constraint({a: 1.0, q_dg[dg.bus]: 1.0}, ">=", 0.0, name=f"qabs_neg{dg.bus}_t{t}")
            q_abs.append(a)

        q_c, caps = {}, {}
        for cap in fleet.capacitors:
            caps[cap.bus] = model.add_variable(f"ucap{cap.bus}_t{t}", 0.0, 1.0, binary=True)
            q_c[cap.bus] = model.add_variable(f"qC{cap.bus}_t{t}", 0.0, cap.q_rated * V_MAX)
            capacitor_constraints(cap, t, model, v[cap.bus], caps[cap.bus], q_c[cap.bus])

        taps = {}
        for reg in regulators:
            e = feeder.edges[reg.edge]
            u = [model.add_variable(f"utap{reg.edge}_{pos}_t{t}".replace("-", "m"), 0.0, 1.0, binary=True)
                 for pos in reg.taps]
            w = [model.add_variable(f"wtap{reg.edge}_{pos}_t{t}".replace("-", "m"), 0.0, V_MAX)
                 for pos in reg.taps]
            regulator_constraints(reg, t, model, v[e.from_bus], v[e.to_bus], u, w)
            taps[reg.edge] = u

        svars = StepVars(v=v, P=P, Q=Q, p_l=p_l, q_l=q_l, q_dg=q_dg, q_c=q_c, p_dg=p_dg)
        linear_pf_constraints(feeder, t, model, svars)

        ps = model.add_variable(f"Ps_t{t}", -math.inf, math.inf)
        row = {ps: 1.0}
        for e in feeder.child_edges(feeder.root):
            row[P[e]] = -feeder.s_base
        model.add_constraint(row, "=", 0.0, name=f"substation_t{t}")

        steps.append(svars)
        reg_u.append(taps)
        cap_u.append(caps)
        p_s.append(ps)

    bvars = None
    if battery is not None and length:
        bvars = bess_constraints(battery, (m, length), model, include_bigm, soc_m=soc_m, terminal_soc=terminal_soc)

    p_t = []
    objective_terms = {}
    for k in range(length):
        t = m + k
        pt = model.add_variable(f"PT_t{t}", -math.inf, math.inf)
        row = {pt: 1.0, p_s[k]: -1.0}
        if bvars is not None:
            row[bvars.p_cd[k]] = -1.0
        model.add_constraint(row, "=", 0.0, name=f"purchase_t{t}")
        p_t.append(pt)

        if objective == "energy":
            objective_terms[pt] = tau
        else:
            objective_terms[pt] = float(profiles.price[t]) * tau
            if bvars is not None and bvars.p_d is not None and price_b:
                objective_terms[bvars.p_d[k]] = price_b * tau

    if bvars is not None:
        for h in bvars.p_abs:
            objective_terms[h] = objective_terms.get(h, 0.0) + TIE_WEIGHT
    for h in q_abs:
        objective_terms[h] = objective_terms.get(h, 0.0) + TIE_WEIGHT * feeder.s_base
    model.set_objective(objective_terms)

    return HorizonProblem(model=model, m=m, length=length, objective=objective, regulators=regulators,
                          steps=steps, reg_u=reg_u, cap_u=cap_u, p_s=p_s, p_t=p_t, bess=bvars, q_abs=q_abs)


def _snap(value, eps):
    return 0.0 if abs(value) < eps else value


def extract_action(problem, solution, k=0):
    """ControlAction at window offset k of a solved problem."""
    tap = {}
    for reg in problem.regulators:
        u = problem.reg_u[k][reg.edge]
        best = max(range(len(u)), key=lambda i: (solution[u[i]], -i))
        tap[reg.edge] = reg.taps[best]
    cap = {bus: int(round(solution[h])) for bus, h in problem.cap_u[k].items()}
    q_dg = {bus: _snap(solution[h], SNAP_PU) for bus, h in problem.steps[k].q_dg.items()}
    p_cd = _snap(solution[problem.bess.p_cd[k]], SNAP_KW) if problem.bess is not None else 0.0
    return ControlAction(tap=tap, cap=cap, q_dg=q_dg, p_cd=p_cd)


def model_v_min(problem, solution, k=0):
    return math.sqrt(min(solution[h] for h in problem.steps[k].v.values()))


@dataclass
class StepOutcome:
    action: ControlAction
    trajectory: list
    objective: float
    v_min_model: float
    stats: dict


def solve_window(problem, solver="builtin", dump_dir=None):
    """Solves a window with the builtin B&B or through the interchange file."""
    model = problem.model
    stage = f"window_t{problem.m}"
    if solver == "export":
        models_dir = os.path.join(dump_dir or ".", "models")
        os.makedirs(models_dir, exist_ok=True)
        path = export_interchange(model, os.path.join(models_dir, f"{model.name}.lp"))
        log.debug("📝 Wrote %s", path)
        return solve_external(model, stage=stage)
    if solver != "builtin":
        raise ValueError(f"unknown solver {solver!r}, expected one of {SOLVERS}")
    return solve_milp(model, stage=stage)


def mpc_step(feeder, fleet, profiles, step, soc, objective, W=DEFAULT_WINDOW, price_b=0.0, solver="builtin",
             tap_positions=None, terminal_soc=False, dump_dir=None):
    """
    Solves the window starting at `step` from measured SOC `soc` and returns
    the first control of the optimal trajectory.
    """
    if tap_positions is None and solver == "builtin":
        tap_positions = BUILTIN_TAP_POSITIONS
    problem = build_horizon_problem(feeder, fleet, profiles, objective, step, W, soc_m=soc, price_b=price_b,
                                    tap_positions=tap_positions, terminal_soc=terminal_soc)
    solution = solve_window(problem, solver=solver, dump_dir=dump_dir)
    try:
        require_optimal(solution, context=f"step {step}")
    except (InfeasibleError, UnboundedError, SolverLimitError) as e:
        dump_path = None
        if dump_dir:
            os.makedirs(dump_dir, exist_ok=True)
            dump_path = export_interchange(problem.model, os.path.join(dump_dir, f"failed_step_{step:03d}.lp"))
        raise StepError(step, solution.status, dump_path=dump_path, cause=e) from e

    trajectory = [extract_action(problem, solution, k) for k in range(problem.length)]
    return StepOutcome(action=trajectory[0], trajectory=trajectory, objective=solution.objective,
                       v_min_model=model_v_min(problem, solution), stats=dict(solution.stats))


@dataclass
class PlantMeasurement:
    P_s: float                    # kW
    Q_s: float                    # kvar
    P_T: float                    # kW
    v_min: float                  # per-unit magnitude
    v_max: float
    soc_next: float | None
    solution: object = None


def check_action(fleet, action, pv_pu):
    for reg in fleet.regulators:
        if action.tap.get(reg.edge, 0) not in reg.taps:
            raise ValueError(f"tap {action.tap.get(reg.edge)} outside regulator {reg.edge} range")
    for cap in fleet.capacitors:
        if action.cap.get(cap.bus, 0) not in (0, 1):
            raise ValueError(f"capacitor {cap.bus} switch must be 0 or 1")
    for dg in fleet.dgs:
        _, q_hi = inverter_q_bounds(dg.s_rated, pv_pu.get(dg.bus, 0.0))
        if abs(action.q_dg.get(dg.bus, 0.0)) > q_hi + 1e-9:
            raise ValueError(f"DG {dg.bus} reactive setpoint beyond inverter capability")
    b = fleet.battery
    if b is not None and not -b.d_r - 1e-9 <= action.p_cd <= b.c_r + 1e-9:
        raise ValueError(f"battery power {action.p_cd} kW outside [-{b.d_r}, {b.c_r}]")


def apply_to_plant(feeder, fleet, action, load_mult, pv_kw, soc=None):
    """
    Runs the nonlinear plant with the action applied. `pv_kw` maps DG bus to
    realized active output in kW.
    """
    check_action(fleet, action, {bus: p / feeder.s_base for bus, p in pv_kw.items()})
    inj = build_injections(feeder, fleet, load_mult=load_mult, pv_kw=pv_kw, action=action)
    sol = solve_nonlinear_sweep(feeder, inj)
    P, Q = sol.substation_injection(feeder)
    P_s = P * feeder.s_base
    soc_next = soc_update(soc, action.p_cd, fleet.battery) if fleet.battery is not None and soc is not None else None
    return PlantMeasurement(P_s=P_s, Q_s=Q * feeder.s_base, P_T=P_s + action.p_cd,
                            v_min=sol.v_min, v_max=sol.v_max, soc_next=soc_next, solution=sol)


@dataclass
class StepRecord:
    step: int
    P_T: float
    P_s: float
    p_cd: float
    p_d: float
    price: float
    cost: float                   # cents, purchase only
    soc: float | None             # after the step
    v_min_model: float
    v_min_plant: float
    v_max_plant: float
    action: ControlAction
    nodes: int = 0
    pivots: int = 0


@dataclass
class SimulationResult:
    objective: str
    window: int
    price_b: float
    soc0: float | None
    records: list = field(default_factory=list)
    totals: dict = field(default_factory=dict)
    error: Exception | None = None

    @property
    def complete(self):
        return self.error is None


def day_totals(records, tau, price_b=0.0, battery=None):
    energy = sum(r.P_T * tau for r in records)
    cost = sum(r.cost for r in records)
    discharged = sum(r.p_d * tau for r in records)
    totals = {
        "steps": len(records),
        "energy_kwh": energy,
        "cost_cents": cost,
        "cost_dollars": cost / 100.0,
        "depreciation_cents": price_b * discharged,
        "discharged_kwh": discharged,
        "cycles": discharged / battery.usable_kwh if battery is not None and battery.usable_kwh > 0 else 0.0,
        "min_voltage_model": min((r.v_min_model for r in records), default=math.nan),
        "min_voltage_plant": min((r.v_min_plant for r in records), default=math.nan),
        "max_voltage_plant": max((r.v_max_plant for r in records), default=math.nan),
    }
    if battery is not None and records:
        totals["final_soc"] = records[-1].soc
    return totals


def run_day(feeder, fleet, profiles, objective, W=DEFAULT_WINDOW, price_b=0.0, solver="builtin",
            tap_positions=None, terminal_soc=False, noise=0.0, dump_dir=None, progress_callback=None):
    """
    Closed-loop simulation over every step of the profiles. Stops at the first
    failing window or diverging plant sweep and returns the partial result
    with `error` set.
    """
    battery = fleet.battery
    soc = battery.soc0 if battery is not None else None
    realized = noisy_load_mult(profiles, noise)
    result = SimulationResult(objective=objective, window=W, price_b=price_b, soc0=soc)
    start = time.perf_counter()
    log.info("🚀 Running %s day on %s: %d steps, W=%d, price_b=%g", objective, feeder.name, profiles.steps, W, price_b)

    for t in range(profiles.steps):
        try:
            outcome = mpc_step(feeder, fleet, profiles, t, soc, objective, W=W, price_b=price_b, solver=solver,
                               tap_positions=tap_positions, terminal_soc=terminal_soc, dump_dir=dump_dir)
        except StepError as e:
            log.error("❌ %s", e)
            result.error = e
            break

        action = outcome.action
        pv_kw = {dg.bus: profiles.pv_kw(dg, t) for dg in fleet.dgs}
        try:
            meas = apply_to_plant(feeder, fleet, action, float(realized[t]), pv_kw, soc=soc)
        except ConvergenceError as e:
            log.error("❌ step %d: plant power flow did not converge: %s", t, e)
            result.error = e
            break
        price = float(profiles.price[t])
        result.records.append(StepRecord(
            step=t, P_T=meas.P_T, P_s=meas.P_s, p_cd=action.p_cd, p_d=action.p_d, price=price,
            cost=price * meas.P_T * profiles.tau, soc=meas.soc_next,
            v_min_model=outcome.v_min_model, v_min_plant=meas.v_min, v_max_plant=meas.v_max,
            action=action, nodes=int(outcome.stats.get("nodes", 0)), pivots=int(outcome.stats.get("pivots", 0)),
        ))
        soc = meas.soc_next
        if progress_callback:
            progress_callback(t + 1, profiles.steps)

    result.totals = day_totals(result.records, profiles.tau, price_b=price_b, battery=battery)
    log.info("✅ %s day: %.3f kWh, $%.2f, %.3f kWh discharged (%.1fs)", objective,
             result.totals["energy_kwh"], result.totals["cost_dollars"], result.totals["discharged_kwh"],
             time.perf_counter() - start)
    return result
