"""
Day-ahead input series: load multiplier, TOU tariff and per-DG PV output.

File format (CSV): step,load_mult,price_c_per_kwh,pv_<id>...
PV columns are in kW; the loader keeps physical units and converts to
per-unit only when a DG setpoint is needed.
"""

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from devices import InfeasibleProfileError

log = logging.getLogger(__name__)

DEFAULT_TAU_H = 0.25
REQUIRED_COLUMNS = ("load_mult", "price_c_per_kwh")


class ProfileError(ValueError):
    """Profiles file is missing, malformed or inconsistent with the feeder."""


@dataclass(frozen=True)
class Profiles:
    steps: int
    tau: float
    load_mult: np.ndarray
    price: np.ndarray                            # cents/kWh
    pv: dict = field(default_factory=dict)       # column name -> kW series

    def pv_kw(self, dg, t):
        series = self.pv.get(dg.p_profile_ref)
        return 0.0 if series is None else float(series[t])

    def window_length(self, m, W):
        """Window clipped to the end of the day."""
        if not 0 <= m < self.steps:
            raise ProfileError(f"window start {m} outside 0..{self.steps - 1}")
        return max(0, min(W, self.steps - m))

    def with_load_mult(self, load_mult):
        return replace(self, load_mult=np.asarray(load_mult, dtype=float))

    @property
    def max_price(self):
        return float(np.max(self.price[: self.steps]))


def load_profiles(path, steps=None, tau=DEFAULT_TAU_H):
    if not os.path.exists(path):
        raise ProfileError(f"profiles file not found: {path}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ProfileError(f"{path}: parse failure: {e}")

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ProfileError(f"{path}: missing columns {missing}")
    if "step" in df.columns:
        df = df.sort_values("step", kind="stable").reset_index(drop=True)

    numeric = df.apply(pd.to_numeric, errors="coerce")
    bad = numeric.columns[numeric.isna().any()].tolist()
    if bad:
        raise ProfileError(f"{path}: non-numeric or empty cells in columns {bad}")

    steps = len(numeric) if steps is None else int(steps)
    if steps < 1 or len(numeric) < steps:
        raise ProfileError(f"{path}: has {len(numeric)} rows, need {steps}")

    profiles = Profiles(
        steps=steps,
        tau=float(tau),
        load_mult=numeric["load_mult"].to_numpy(dtype=float),
        price=numeric["price_c_per_kwh"].to_numpy(dtype=float),
        pv={c: numeric[c].to_numpy(dtype=float) for c in numeric.columns if c.startswith("pv_")},
    )
    check_profiles(profiles)
    log.info("📈 Loaded profiles %s: %d steps, %d PV series", os.path.basename(path), steps, len(profiles.pv))
    return profiles


def check_profiles(profiles, feeder=None, fleet=None):
    """
    Series-level checks, plus DG/battery consistency when a feeder is given.
    Raises ProfileError or InfeasibleProfileError.
    """
    n = profiles.steps
    if np.any(profiles.load_mult[:n] < 0):
        raise ProfileError("load_mult must be non-negative")
    if np.any(profiles.price[:n] < 0):
        t = int(np.argmax(profiles.price[:n] < 0))
        raise ProfileError(f"negative price {profiles.price[t]} at step {t}")
    for name, series in profiles.pv.items():
        if np.any(series[:n] < 0):
            raise ProfileError(f"{name}: negative PV output")

    if fleet is None:
        return profiles
    for dg in fleet.dgs:
        series = profiles.pv.get(dg.p_profile_ref)
        if series is None:
            raise ProfileError(f"DG at bus {dg.bus}: profile column {dg.p_profile_ref!r} not found")
        limit_kw = dg.s_rated * feeder.s_base
        over = np.nonzero(series[:n] > limit_kw * (1.0 + 1e-12))[0]
        if over.size:
            t = int(over[0])
            raise InfeasibleProfileError(
                f"DG at bus {dg.bus}: PV {series[t]:.3f} kW at step {t} exceeds rating {limit_kw:.3f} kVA"
            )
    if fleet.battery is not None and abs(fleet.battery.tau - profiles.tau) > 1e-12:
        raise ProfileError(f"battery interval {fleet.battery.tau} h differs from profile interval {profiles.tau} h")
    return profiles


def noisy_load_mult(profiles, sigma, seed=0):
    """Realized load multipliers forecast*(1 + sigma*N(0,1)), clipped at zero."""
    if sigma <= 0:
        return profiles.load_mult.copy()
    rng = np.random.default_rng(seed)
    draw = rng.standard_normal(len(profiles.load_mult))
    return np.clip(profiles.load_mult * (1.0 + sigma * draw), 0.0, None)
