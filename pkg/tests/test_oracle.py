from dataclasses import replace

import pytest

from controller import build_horizon_problem
from oracle import (
    EnumerationGrid,
    EnumerationLimitError,
    brute_force_schedule,
    certify_window,
    count_combinations,
    enumerate_problem,
)
from solver import solve_milp


@pytest.fixture
def no_battery(feeder4):
    feeder, fleet = feeder4
    return feeder, replace(fleet, battery=None)


def _profiles(make_profiles, loads, prices=None):
    prices = prices or [10.0] * len(loads)
    return make_profiles(loads, prices, pv={"pv_3": [20.0] * len(loads)})


def test_combination_count(no_battery, feeder4, make_profiles):
    feeder, fleet = no_battery
    profiles = _profiles(make_profiles, [0.6, 0.7])
    one = build_horizon_problem(feeder, fleet, profiles, "energy", 0, 1, tap_positions=5)
    two = build_horizon_problem(feeder, fleet, profiles, "energy", 0, 2, tap_positions=5)
    assert count_combinations(one, EnumerationGrid()) == 10
    assert count_combinations(two, EnumerationGrid()) == 100

    _, full_fleet = feeder4
    revenue = build_horizon_problem(feeder, full_fleet, profiles, "revenue", 0, 1, tap_positions=5)
    # delta/beta add four patterns per step
    assert count_combinations(revenue, EnumerationGrid()) == 40
    assert count_combinations(revenue, EnumerationGrid(battery_levels=(-100.0, 0.0, 100.0))) == 120


def test_oracle_matches_branch_and_bound(no_battery, make_profiles):
    feeder, fleet = no_battery
    profiles = _profiles(make_profiles, [0.6, 0.9])
    report = brute_force_schedule(feeder, fleet, profiles, "energy", (0, 2))
    assert report["status"] == "optimal"
    assert report["combinations"] == 100
    assert report["feasible_combinations"] <= 100

    problem = build_horizon_problem(feeder, fleet, profiles, "energy", 0, 2, tap_positions=5)
    milp_sol = solve_milp(problem.model)
    assert report["objective"] == pytest.approx(milp_sol.objective, rel=1e-6)
    assert len(report["trajectory"]) == 2
    assert report["action"] == report["trajectory"][0]
    assert report["action"].tap[0] in (-16, -8, 0, 8, 16)


def test_certify_revenue_window(feeder4, make_profiles):
    feeder, fleet = feeder4
    profiles = _profiles(make_profiles, [0.5], [50.0])
    report = certify_window(feeder, fleet, profiles, "revenue", 0, 1, soc_m=0.5, price_b=20.0)
    assert report["certified"]
    assert report["rel_error"] <= 1e-6
    assert report["combinations"] == 40
    assert report["milp_status"] == report["oracle_status"] == "optimal"


def test_battery_levels_grid(feeder4, make_profiles):
    feeder, fleet = feeder4
    profiles = _profiles(make_profiles, [0.5])
    grid = EnumerationGrid(tap_positions=1, battery_levels=(-100.0, -50.0, 0.0))
    report = brute_force_schedule(feeder, fleet, profiles, "energy", (0, 1), grid=grid, soc_m=0.5)
    assert report["action"].p_cd == pytest.approx(-100.0)


def test_enumeration_limit(no_battery, make_profiles):
    feeder, fleet = no_battery
    profiles = _profiles(make_profiles, [0.6, 0.7])
    problem = build_horizon_problem(feeder, fleet, profiles, "energy", 0, 2, tap_positions=5)
    with pytest.raises(EnumerationLimitError, match="100 combinations"):
        enumerate_problem(problem, EnumerationGrid(limit=99))


def test_infeasible_window_is_certified(no_battery, make_profiles):
    feeder, fleet = no_battery
    profiles = _profiles(make_profiles, [6.0])
    report = certify_window(feeder, fleet, profiles, "energy", 0, 1, grid=EnumerationGrid(tap_positions=1))
    assert report["oracle_status"] == "infeasible"
    assert report["milp_status"] == "infeasible"
    assert report["certified"]
    assert report["rel_error"] is None
