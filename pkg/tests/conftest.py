from datetime import date, datetime

import numpy as np
import pytest

import resload as rl
from resload.data import DateRange, TimeSeriesDataset, usable_days

TRAIN_RANGE = DateRange(date(2019, 7, 1), date(2019, 8, 9))


@pytest.fixture(scope="session")
def ds250():
    """Small synthetic series with normalization fitted; do not mutate."""
    ds = rl.synthetic_dataset(days=250, seed=7)
    rl.fit_normalization(ds, TRAIN_RANGE)
    return ds


@pytest.fixture(scope="session")
def days40(ds250):
    return usable_days(ds250, TRAIN_RANGE, 6)


@pytest.fixture(scope="session")
def batch40(ds250, days40):
    return rl.build_day_batch(ds250, days40, 6)


def make_ramp_dataset(n_hours: int, start=datetime(2019, 1, 1)) -> TimeSeriesDataset:
    """Loads 1..n and temperatures 1001..n+1000: every lag value is its index."""
    load = np.arange(1, n_hours + 1, dtype=np.float64)
    temp = load + 1000.0
    return TimeSeriesDataset(start=start, load=load, temperature=temp)
