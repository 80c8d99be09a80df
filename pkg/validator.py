import math

from devices import V_MAX, V_MIN

# Plant voltages may leave the band by the linearization error
PLANT_TOLERANCE_PU = 0.005
IDENTITY_TOL = 1e-9
MODEL_VOLTAGE_TOL = 1e-6


def validate_result(result, fleet, tau, plant_tolerance=PLANT_TOLERANCE_PU):
    """
    Checks a SimulationResult for:
    1. Purchase accounting (P_T = P_s + p_cd on every record)
    2. Battery SOC bounds and, for a lossless battery, SOC telescoping
    3. Model voltages inside the band; plant voltages within tolerance of it

    Returns {"valid", "errors", "warnings", "stats"}.
    """
    errors = []
    warnings = []
    records = result.records

    if not records:
        errors.append("Result has no step records.")
        return {"valid": False, "errors": errors, "warnings": warnings, "stats": {"records": 0}}
    if result.error is not None:
        errors.append(f"Run stopped early: {result.error}")

    # --- 1. Accounting ---
    for r in records:
        gap = abs(r.P_T - (r.P_s + r.p_cd))
        if gap > IDENTITY_TOL * max(1.0, abs(r.P_T)):
            errors.append(f"Step {r.step}: P_T {r.P_T:.6f} != P_s + p_cd ({r.P_s + r.p_cd:.6f}).")

    # --- 2. Battery ---
    battery = fleet.battery
    telescoping_gap = None
    if battery is not None:
        for r in records:
            if not battery.e_minus - IDENTITY_TOL <= r.soc <= battery.e_plus + IDENTITY_TOL:
                errors.append(f"Step {r.step}: SOC {r.soc:.6f} outside [{battery.e_minus}, {battery.e_plus}].")
        if battery.eta == 0.0 and battery.rho == 1.0:
            expected = battery.soc0 + tau / battery.q_bat * sum(r.p_cd for r in records)
            telescoping_gap = abs(records[-1].soc - expected)
            if telescoping_gap > IDENTITY_TOL:
                errors.append(f"SOC telescoping off by {telescoping_gap:.3e}.")

    # --- 3. Voltages ---
    lo, hi = math.sqrt(V_MIN), math.sqrt(V_MAX)
    plant_outside = 0
    for r in records:
        if r.v_min_model < lo - MODEL_VOLTAGE_TOL:
            errors.append(f"Step {r.step}: model voltage {r.v_min_model:.6f} below {lo:.2f} pu.")
        if r.v_min_plant < lo or r.v_max_plant > hi:
            plant_outside += 1
            if r.v_min_plant < lo - plant_tolerance or r.v_max_plant > hi + plant_tolerance:
                warnings.append(
                    f"Step {r.step}: plant voltage range [{r.v_min_plant:.4f}, {r.v_max_plant:.4f}] "
                    f"beyond band by more than {plant_tolerance} pu."
                )

    stats = {
        "records": len(records),
        "min_voltage_model": min(r.v_min_model for r in records),
        "min_voltage_plant": min(r.v_min_plant for r in records),
        "max_voltage_plant": max(r.v_max_plant for r in records),
        "plant_steps_outside_band": plant_outside,
        "soc_telescoping_gap": telescoping_gap,
    }
    return {"valid": not errors, "errors": errors, "warnings": warnings, "stats": stats}
