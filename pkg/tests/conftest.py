import os
import sys

import numpy as np
import pandas as pd
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from feeder import load_feeder  # noqa: E402
from profiles import Profiles  # noqa: E402

DATA_DIR = os.path.join(ROOT, "data")


def data_path(name):
    return os.path.join(DATA_DIR, name)


@pytest.fixture
def feeder2():
    return load_feeder(data_path("feeder_2bus.json"))


@pytest.fixture
def feeder4():
    return load_feeder(data_path("feeder_4bus.json"))


@pytest.fixture
def feeder13():
    return load_feeder(data_path("feeder_13bus.json"))


@pytest.fixture
def make_profiles():
    """Factory for in-memory profiles: make_profiles(load, price, pv={name: series})."""

    def _make(load_mult, price, pv=None, tau=0.25):
        load_mult = np.asarray(load_mult, dtype=float)
        return Profiles(
            steps=len(load_mult),
            tau=tau,
            load_mult=load_mult,
            price=np.asarray(price, dtype=float),
            pv={k: np.asarray(v, dtype=float) for k, v in (pv or {}).items()},
        )

    return _make


SHORT_LOAD = [0.40, 0.35, 0.45, 0.70, 0.95, 1.00, 0.80, 0.60]
SHORT_PRICE = [10, 10, 10, 20, 50, 50, 50, 20]
SHORT_PV = [0.0, 0.0, 30.0, 80.0, 100.0, 60.0, 10.0, 0.0]


@pytest.fixture
def short_profiles_csv(tmp_path):
    """Eight-step day for the 4-bus feeder with a TOU spread."""
    path = tmp_path / "profiles_short.csv"
    pd.DataFrame({
        "step": range(len(SHORT_LOAD)),
        "load_mult": SHORT_LOAD,
        "price_c_per_kwh": SHORT_PRICE,
        "pv_3": SHORT_PV,
    }).to_csv(path, index=False)
    return str(path)
