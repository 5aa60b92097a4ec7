import json
from datetime import datetime

import numpy as np
import pytest

from hierrisk.features import D_ST, TemperatureScaler
from hierrisk.grid import GridSpec
from hierrisk.ingest import (
    AccidentRecord,
    TripRecord,
    build_flows,
    build_risk_map,
    load_csv_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
    split_targets,
)
from hierrisk.window import DataError
from test.helpers import tiny_city

WHEN = datetime(2023, 1, 2, 8)
GRID = GridSpec(rows=3, cols=3)


def _accident(region: int, severity: str) -> AccidentRecord:
    lat, lon = GRID.center(region)
    return AccidentRecord(WHEN, lat, lon, severity)


def _trip(origin: int, dest: int) -> TripRecord:
    a = GRID.center(origin)
    b = GRID.center(dest)
    return TripRecord(WHEN, a[0], a[1], WHEN, b[0], b[1])


def test_no_records_gives_zero_map() -> None:
    risk, dropped = build_risk_map([], GRID, 0)
    assert risk.total == 0.0
    assert dropped == 0


def test_fatal_record_scores_three() -> None:
    risk, _ = build_risk_map([_accident(5, "fatal")], GRID, 0)
    expected = np.zeros(9)
    expected[5] = 3.0
    np.testing.assert_array_equal(risk.values, expected)


def test_risk_sums_within_region() -> None:
    risk, _ = build_risk_map([_accident(2, "minor"), _accident(2, "injured")], GRID, 0)
    assert risk.values[2] == 3.0
    assert risk.total == 3.0


def test_out_of_bounds_records_dropped(caplog) -> None:
    records = [_accident(1, "fatal"), AccidentRecord(WHEN, 0.0, 0.0, "minor")]
    with caplog.at_level("INFO", logger="hierrisk.ingest"):
        risk, dropped = build_risk_map(records, GRID, 7)
    assert dropped == 1
    assert risk.total == 3.0
    assert "interval=7 dropped=1" in caplog.text


def test_unknown_severity_rejected() -> None:
    with pytest.raises(DataError) as exc_info:
        AccidentRecord(WHEN, 0.0, 0.0, "scratch")
    assert "unknown severity 'scratch'" in str(exc_info.value)


def test_single_trip_flows() -> None:
    inflow, outflow, dropped = build_flows([_trip(1, 2)], GRID, 0)
    assert outflow[1] == 1 and outflow.sum() == 1
    assert inflow[2] == 1 and inflow.sum() == 1
    assert dropped == 0


def test_no_trips_zero_flows() -> None:
    inflow, outflow, _ = build_flows([], GRID, 0)
    assert not inflow.any() and not outflow.any()


def test_self_loop_trips() -> None:
    inflow, outflow, _ = build_flows([_trip(4, 4), _trip(4, 4)], GRID, 0)
    assert inflow[4] == 2
    assert outflow[4] == 2


def test_trip_time_order_checked() -> None:
    with pytest.raises(DataError):
        TripRecord(WHEN, 0.0, 0.0, datetime(2023, 1, 1), 0.0, 0.0)


@pytest.mark.parametrize(
    "n, sizes",
    [(100, (60, 20, 20)), (10, (6, 2, 2)), (101, (61, 20, 20))],
)
def test_split_ratio(n: int, sizes: tuple[int, int, int]) -> None:
    train, val, test = split_targets(np.arange(n))
    assert (train.size, val.size, test.size) == sizes
    assert train.max() < val.min() < test.min()
    assert np.array_equal(np.concatenate([train, val, test]), np.arange(n))


def test_split_too_small() -> None:
    with pytest.raises(DataError) as exc_info:
        split_targets(np.arange(4))
    assert "dataset too small" in str(exc_info.value)


def test_split_dataset_starts_after_full_window() -> None:
    dataset = tiny_city()
    train, val, test = split_dataset(dataset, 2, 1, 168)
    assert train[0] == 168
    assert test[-1] == dataset.n_intervals - 1
    assert train.size + val.size + test.size == dataset.n_intervals - 168


def test_st_features_shape() -> None:
    dataset = tiny_city()
    scaler = TemperatureScaler.fit(dataset.temperature)
    st = dataset.all_st_features(scaler)
    assert st.shape == (dataset.n_intervals, 9, D_ST)


def test_dataset_save_load(tmp_path) -> None:
    dataset = tiny_city()
    save_dataset(dataset, tmp_path / "data")
    loaded = load_dataset(tmp_path / "data")
    assert loaded.grid == dataset.grid
    assert loaded.start == dataset.start
    assert loaded.holidays == dataset.holidays
    np.testing.assert_array_equal(loaded.risk, dataset.risk)
    np.testing.assert_array_equal(loaded.weather, dataset.weather)
    np.testing.assert_array_equal(loaded.rs_tiles, dataset.rs_tiles)
    assert loaded.meta["seed"] == 0


def _write_csv_dir(directory, *, weather: str = "rainy") -> None:
    directory.mkdir()
    lat0, lon0 = GRID.center(0)
    lat4, lon4 = GRID.center(4)
    (directory / "grid.json").write_text(
        json.dumps(
            {
                "rows": 3,
                "cols": 3,
                "origin_lat": GRID.origin_lat,
                "origin_lon": GRID.origin_lon,
                "start": "2023-01-02T00:00:00",
                "n_intervals": 4,
            }
        ),
        encoding="utf-8",
    )
    (directory / "accidents.csv").write_text(
        "timestamp,lat,lon,severity\n"
        f"2023-01-02 01:30:00,{lat4},{lon4},fatal\n"
        f"2023-01-02 01:45:00,{lat4},{lon4},minor\n"
        f"2023-01-02 02:00:00,0.0,0.0,minor\n"
        f"2023-01-05 00:00:00,{lat0},{lon0},minor\n",
        encoding="utf-8",
    )
    (directory / "trips.csv").write_text(
        "pickup_time,pickup_lat,pickup_lon,dropoff_time,dropoff_lat,dropoff_lon\n"
        f"2023-01-02 00:10:00,{lat0},{lon0},2023-01-02 01:05:00,{lat4},{lon4}\n",
        encoding="utf-8",
    )
    (directory / "poi.csv").write_text(
        f"lat,lon,category\n{lat0},{lon0},school\n{lat0},{lon0},commercial\n",
        encoding="utf-8",
    )
    (directory / "weather.csv").write_text(
        "timestamp,temperature,weather\n"
        "2023-01-02 00:00:00,3.5,sunny\n"
        f"2023-01-02 01:00:00,4.0,{weather}\n",
        encoding="utf-8",
    )


def test_csv_directory_ingest(tmp_path, caplog) -> None:
    _write_csv_dir(tmp_path / "city")
    with caplog.at_level("WARNING", logger="hierrisk.ingest"):
        dataset = load_csv_dataset(tmp_path / "city")
    assert "weather.csv missing intervals=2 of 4" in caplog.text
    assert dataset.n_intervals == 4
    assert dataset.risk[1, 4] == 4.0
    assert dataset.risk.sum() == 4.0
    assert dataset.outflow[0, 0] == 1.0
    assert dataset.inflow[1, 4] == 1.0
    assert dataset.poi[0, 1] == pytest.approx(0.5)
    assert dataset.poi[0, 6] == pytest.approx(0.5)
    assert dataset.weather[:2].tolist() == [0, 1]
    assert dataset.temperature[1] == pytest.approx(4.0)
    assert dataset.weather[2:].tolist() == [0, 0]
    assert dataset.temperature[2:].tolist() == [0.0, 0.0]
    assert not dataset.road.any()
    assert dataset.rs_tiles is None


def test_csv_unknown_weather(tmp_path) -> None:
    _write_csv_dir(tmp_path / "city", weather="hail")
    with pytest.raises(DataError) as exc_info:
        load_csv_dataset(tmp_path / "city")
    assert "unknown weather 'hail'" in str(exc_info.value)


def test_csv_missing_file(tmp_path) -> None:
    _write_csv_dir(tmp_path / "city")
    (tmp_path / "city" / "trips.csv").unlink()
    with pytest.raises(DataError) as exc_info:
        load_csv_dataset(tmp_path / "city")
    assert "trips.csv: cannot open file" in str(exc_info.value)


def test_csv_missing_column(tmp_path) -> None:
    _write_csv_dir(tmp_path / "city")
    (tmp_path / "city" / "poi.csv").write_text("lat,lon\n1,2\n", encoding="utf-8")
    with pytest.raises(DataError) as exc_info:
        load_csv_dataset(tmp_path / "city")
    assert "missing columns category" in str(exc_info.value)
