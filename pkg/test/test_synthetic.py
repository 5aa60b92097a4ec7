import numpy as np
import pytest

from hierrisk.grid import GridSpec
from hierrisk.metrics import RUSH_HOURS
from hierrisk.synthetic import generate_synthetic_city, hour_intensity, tile_group
from hierrisk.window import DataError
from test.helpers import tiny_city


def test_same_seed_same_city() -> None:
    a = tiny_city(seed=3)
    b = tiny_city(seed=3)
    for name in ("risk", "inflow", "outflow", "poi", "road", "temperature", "weather", "rs_tiles"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_different_seed_differs() -> None:
    assert not np.array_equal(tiny_city(seed=1).risk, tiny_city(seed=2).risk)


def test_mostly_zero_risk() -> None:
    city = generate_synthetic_city(0, GridSpec(rows=8, cols=8), 2, q=1, tile_size=8)
    assert float((city.risk == 0).mean()) >= 0.7


def test_rush_hours_riskier() -> None:
    city = generate_synthetic_city(0, GridSpec(rows=8, cols=8), 2, q=1, tile_size=8)
    hours = np.array([city.hour(t) for t in range(city.n_intervals)])
    rush = np.isin(hours, list(RUSH_HOURS))
    assert city.risk[rush].mean() > city.risk[~rush].mean()


def test_flows_balance_per_interval() -> None:
    city = tiny_city()
    np.testing.assert_array_equal(city.inflow.sum(axis=1), city.outflow.sum(axis=1))


def test_tiles_track_density() -> None:
    city = tiny_city(rows=4, cols=4)
    assert city.rs_tiles.shape == (16, 8, 8, 3)
    assert city.rs_tiles.min() >= 0.0 and city.rs_tiles.max() <= 1.0
    density = np.array(city.meta["density"])
    texture = city.rs_tiles.std(axis=(1, 2)).mean(axis=-1)
    assert np.corrcoef(density, texture)[0, 1] > 0


def test_too_few_weeks() -> None:
    with pytest.raises(DataError) as exc_info:
        generate_synthetic_city(0, GridSpec(rows=2, cols=2), 4)
    assert "weeks=4 must be >= q + 1 = 5" in str(exc_info.value)


def test_hour_profile() -> None:
    assert hour_intensity(8) == 1.0
    assert hour_intensity(3) < hour_intensity(12) < hour_intensity(17)


def test_tile_groups() -> None:
    assert tile_group(np.array([0.1, 0.4, 0.9])).tolist() == [0, 1, 2]
