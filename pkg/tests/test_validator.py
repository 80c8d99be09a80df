import pytest

from controller import ControlAction, SimulationResult, StepError, StepRecord
from validator import validate_result


def _record(step, p_cd=0.0, soc=0.25, P_s=200.0, v_min_model=0.96, v_min_plant=0.96, v_max_plant=1.0, P_T=None):
    return StepRecord(step=step, P_T=P_s + p_cd if P_T is None else P_T, P_s=P_s, p_cd=p_cd, p_d=max(0.0, -p_cd),
                      price=10.0, cost=0.0, soc=soc, v_min_model=v_min_model, v_min_plant=v_min_plant,
                      v_max_plant=v_max_plant, action=ControlAction(p_cd=p_cd))


def _result(records, error=None):
    return SimulationResult(objective="revenue", window=2, price_b=0.0, soc0=0.25, records=records, error=error)


def test_consistent_day_is_valid(feeder4):
    _, fleet = feeder4
    records = [_record(0, 100.0, 0.25 + 25 / 300), _record(1, -100.0, 0.25)]
    report = validate_result(_result(records), fleet, 0.25)
    assert report["valid"], report["errors"]
    assert report["stats"]["records"] == 2
    assert report["stats"]["soc_telescoping_gap"] == pytest.approx(0.0, abs=1e-12)


def test_empty_result():
    report = validate_result(_result([]), None, 0.25)
    assert not report["valid"]
    assert "no step records" in report["errors"][0]


def test_accounting_error(feeder4):
    _, fleet = feeder4
    report = validate_result(_result([_record(0, P_T=150.0)]), fleet, 0.25)
    assert any("P_T" in e for e in report["errors"])


def test_soc_out_of_bounds_and_telescoping(feeder4):
    _, fleet = feeder4
    report = validate_result(_result([_record(0, -100.0, 0.2)]), fleet, 0.25)
    assert any("outside" in e for e in report["errors"])
    assert any("telescoping" in e for e in report["errors"])


def test_model_voltage_below_band(feeder4):
    _, fleet = feeder4
    report = validate_result(_result([_record(0, v_min_model=0.94)]), fleet, 0.25)
    assert any("model voltage" in e for e in report["errors"])


def test_plant_excursions_are_warnings(feeder4):
    _, fleet = feeder4
    records = [_record(0, v_min_plant=0.948), _record(1, v_min_plant=0.94, soc=0.25)]
    report = validate_result(_result(records), fleet, 0.25)
    assert report["valid"]
    assert report["stats"]["plant_steps_outside_band"] == 2
    assert len(report["warnings"]) == 1
    assert "Step 1" in report["warnings"][0]


def test_stopped_run_is_invalid(feeder4):
    _, fleet = feeder4
    report = validate_result(_result([_record(0)], error=StepError(1, "infeasible")), fleet, 0.25)
    assert not report["valid"]
    assert "step 1" in report["errors"][0]
