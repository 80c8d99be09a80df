"""
Scenario orchestration for the command-line surface.

Each command loads its inputs, runs the experiment and writes its result
files; it returns a result dict and leaves exit codes to the caller.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from controller import DEFAULT_WINDOW, OBJECTIVES, SOLVERS, mpc_step, run_day
from feeder import load_feeder
from oracle import EnumerationGrid, certify_window
from powerflow import ConvergenceError, build_injections, compare_pf
from profiles import check_profiles, load_profiles
from utils import get_session_stats, reset_session_stats
from validator import validate_result

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"
Q_DIGITS = 6


@dataclass
class Scenario:
    feeder: str
    profiles: str
    objective: str = "energy"
    window: int = DEFAULT_WINDOW
    price_b: float = 0.0
    solver: str = "builtin"
    out_dir: str = "out"
    oracle: bool = False
    terminal_soc: bool = False
    noise: float = 0.0
    tap_positions: int | None = None

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.price_b < 0:
            raise ValueError("price_b must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        return self


def load_inputs(scenario):
    feeder, fleet = load_feeder(scenario.feeder)
    profiles = load_profiles(scenario.profiles)
    check_profiles(profiles, feeder, fleet)
    return feeder, fleet, profiles


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, default=str)
    return path


def _write_csv(path, rows, columns):
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def control_columns(feeder, fleet):
    return ([f"tap_{r.edge}" for r in fleet.regulators]
            + [f"cap_{c.bus}" for c in fleet.capacitors]
            + [f"q_dg_{g.bus}_kvar" for g in fleet.dgs])


def control_values(feeder, fleet, action):
    values = [action.tap[r.edge] for r in fleet.regulators]
    values += [action.cap[c.bus] for c in fleet.capacitors]
    values += [round(action.q_dg[g.bus] * feeder.s_base, Q_DIGITS) + 0.0 for g in fleet.dgs]
    return values


STEP_COLUMNS = ["step", "P_T_kw", "P_s_kw", "p_cd_kw", "p_d_kw", "price_c_per_kwh", "cost_cents", "soc",
                "v_min_model", "v_min_plant", "v_max_plant"]


def write_steps_csv(path, feeder, fleet, result):
    columns = STEP_COLUMNS + control_columns(feeder, fleet) + ["nodes", "pivots"]
    rows = []
    for r in result.records:
        rows.append([r.step, r.P_T, r.P_s, r.p_cd, r.p_d, r.price, r.cost, r.soc,
                     r.v_min_model, r.v_min_plant, r.v_max_plant]
                    + control_values(feeder, fleet, r.action) + [r.nodes, r.pivots])
    return _write_csv(path, rows, columns)


def cmd_run(scenario, progress_callback=None):
    """
    Full-day closed-loop run. Writes steps.csv and summary.json (plus
    certification.json with --oracle). A failing window or diverging plant sweep
    still writes the partial outputs before its error is raised.
    """
    scenario.validate()
    reset_session_stats()
    job_start = time.time()
    log.info("🎬 RUN: %s | %s | W=%d | price_b=%g | %s", os.path.basename(scenario.feeder),
             scenario.objective, scenario.window, scenario.price_b, scenario.solver)

    feeder, fleet, profiles = load_inputs(scenario)
    os.makedirs(scenario.out_dir, exist_ok=True)
    soc0 = fleet.battery.soc0 if fleet.battery is not None else None

    certification_path = None
    if scenario.oracle:
        if progress_callback:
            progress_callback("certifying")
        grid = EnumerationGrid(tap_positions=scenario.tap_positions or EnumerationGrid().tap_positions)
        report = certify_window(feeder, fleet, profiles, scenario.objective, 0, scenario.window,
                                soc_m=soc0, price_b=scenario.price_b, grid=grid)
        certification_path = _write_json(os.path.join(scenario.out_dir, "certification.json"), report)

    if progress_callback:
        progress_callback("simulating")
    result = run_day(feeder, fleet, profiles, scenario.objective, W=scenario.window, price_b=scenario.price_b,
                     solver=scenario.solver, tap_positions=scenario.tap_positions,
                     terminal_soc=scenario.terminal_soc, noise=scenario.noise, dump_dir=scenario.out_dir)

    steps_path = write_steps_csv(os.path.join(scenario.out_dir, "steps.csv"), feeder, fleet, result)
    validation = validate_result(result, fleet, profiles.tau)
    if validation["valid"]:
        log.info("✅ VALIDATION PASSED")
    else:
        log.warning("❌ VALIDATION FAILED (%d errors)", len(validation["errors"]))
        for err in validation["errors"]:
            log.warning("   - ERROR: %s", err)
    for warn in validation["warnings"]:
        log.warning("   - %s", warn)

    summary = {
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "scenario": {**asdict(scenario), "soc0": soc0, "feeder_name": feeder.name, "steps": profiles.steps},
        "complete": result.complete,
        "totals": result.totals,
        "validation": validation,
    }
    if result.error is not None:
        summary["error"] = str(result.error)
    summary_path = _write_json(os.path.join(scenario.out_dir, "summary.json"), summary)

    total_time = time.time() - job_start
    log.info("💰 DAY COMPLETE: %.3f kWh, $%.2f | %s | %.1fs", result.totals["energy_kwh"],
             result.totals["cost_dollars"], get_session_stats(), total_time)

    if result.error is not None:
        raise result.error

    return {
        "status": "success",
        "steps_csv": steps_path,
        "summary_json": summary_path,
        "certification_json": certification_path,
        "summary": summary,
        "result": result,
        "metadata": {"processing_time": total_time, "solver_stats": get_session_stats()},
    }


def cmd_sweep_price_b(scenario, values):
    """
    One full-day run per depreciation price. Failed runs are recorded and the
    sweep continues. Discharge must be non-increasing in price_b.
    """
    scenario.validate()
    reset_session_stats()
    unique = sorted(set(float(v) for v in values))
    if len(unique) != len(values):
        log.warning("⚠️ Duplicate price_b values removed: %s -> %s", list(values), unique)
    if any(v < 0 for v in unique):
        raise ValueError("price_b values must be non-negative")

    feeder, fleet, profiles = load_inputs(scenario)
    os.makedirs(scenario.out_dir, exist_ok=True)

    rows = []
    for price_b in unique:
        log.info("💲 price_b = %g c/kWh", price_b)
        result = run_day(feeder, fleet, profiles, scenario.objective, W=scenario.window, price_b=price_b,
                         solver=scenario.solver, tap_positions=scenario.tap_positions,
                         terminal_soc=scenario.terminal_soc, noise=scenario.noise, dump_dir=scenario.out_dir)
        status = "ok" if result.complete else type(result.error).__name__
        rows.append({"price_b": price_b, "discharged_kwh": result.totals["discharged_kwh"],
                     "energy_kwh": result.totals["energy_kwh"], "cost_dollars": result.totals["cost_dollars"],
                     "status": status})

    completed = [r["discharged_kwh"] for r in rows if r["status"] == "ok"]
    monotone = all(b <= a + 1e-9 for a, b in zip(completed, completed[1:]))
    if not monotone:
        log.error("❌ Discharged energy increases with price_b: %s", completed)

    path = _write_csv(os.path.join(scenario.out_dir, "sweep_price_b.csv"), rows,
                      ["price_b", "discharged_kwh", "energy_kwh", "cost_dollars", "status"])
    return {"status": "success", "sweep_csv": path, "rows": rows, "monotone": monotone,
            "metadata": {"solver_stats": get_session_stats()}}


def cmd_validate_pf(feeder_path, profiles_path, out_dir, steps=None, load_scale=1.0):
    """Linear-vs-nonlinear voltage error per step with devices at neutral settings."""
    feeder, fleet = load_feeder(feeder_path)
    profiles = load_profiles(profiles_path)
    check_profiles(profiles, feeder, fleet)
    os.makedirs(out_dir, exist_ok=True)
    steps = range(profiles.steps) if steps is None else steps

    rows = []
    for t in steps:
        mult = float(profiles.load_mult[t]) * load_scale
        pv_kw = {dg.bus: profiles.pv_kw(dg, t) for dg in fleet.dgs}
        inj = build_injections(feeder, fleet, load_mult=mult, pv_kw=pv_kw)
        try:
            report = compare_pf(feeder, inj)
            rows.append({"step": t, "load_mult": mult, "max_error_pu": report["max_error"],
                         "mean_error_pu": report["mean_error"], "status": "ok"})
        except ConvergenceError as e:
            log.warning("⚠️ Step %d: %s", t, e)
            rows.append({"step": t, "load_mult": mult, "max_error_pu": np.nan,
                         "mean_error_pu": np.nan, "status": "diverged"})

    path = _write_csv(os.path.join(out_dir, "validate_pf.csv"), rows,
                      ["step", "load_mult", "max_error_pu", "mean_error_pu", "status"])
    errors = [r["max_error_pu"] for r in rows if r["status"] == "ok"]
    max_error = max(errors, default=0.0)
    log.info("📐 Power-flow validation: %d steps, max error %.2e pu", len(rows), max_error)
    return {"status": "success", "validate_csv": path, "rows": rows, "max_error": max_error,
            "diverged": sum(1 for r in rows if r["status"] != "ok")}


def cmd_voltvar_table(scenario):
    """
    Single-step optima at the minimum- and maximum-loading steps under both
    objectives. Energy and revenue rows must agree at each loading.
    """
    scenario.validate()
    feeder, fleet, profiles = load_inputs(scenario)
    os.makedirs(scenario.out_dir, exist_ok=True)
    columns = ["loading", "objective", "step"] + control_columns(feeder, fleet)
    path = os.path.join(scenario.out_dir, "voltvar_table.csv")

    if not (fleet.regulators or fleet.capacitors or fleet.dgs):
        log.info("ℹ️ No Volt-VAr devices on %s, writing an empty table", feeder.name)
        _write_csv(path, [], columns)
        return {"status": "success", "voltvar_csv": path, "rows": [], "identical": True}

    load = profiles.load_mult[: profiles.steps]
    soc0 = fleet.battery.soc0 if fleet.battery is not None else None
    rows, settings = [], {}
    for loading, t in (("min", int(np.argmin(load))), ("max", int(np.argmax(load)))):
        for objective in OBJECTIVES:
            outcome = mpc_step(feeder, fleet, profiles, t, soc0, objective, W=1, price_b=scenario.price_b,
                               solver=scenario.solver, tap_positions=scenario.tap_positions,
                               dump_dir=scenario.out_dir)
            values = control_values(feeder, fleet, outcome.action)
            settings[(loading, objective)] = values
            rows.append([loading, objective, t] + values)

    identical = all(settings[(lv, "energy")] == settings[(lv, "revenue")] for lv in ("min", "max"))
    if not identical:
        log.error("❌ Energy and revenue Volt-VAr settings differ: %s", settings)
    _write_csv(path, rows, columns)
    return {"status": "success", "voltvar_csv": path, "rows": rows, "identical": identical}
