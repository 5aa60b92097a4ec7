from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from hierrisk import storage
from hierrisk.features import (
    POI_CATEGORIES,
    RISK_BY_SEVERITY,
    WEATHER_KINDS,
    RiskMap,
    TemperatureScaler,
    assemble_st_features,
    normalize_poi,
    temporal_features,
)
from hierrisk.grid import GridSpec
from hierrisk.window import DataError, first_valid_target

logger = logging.getLogger(__name__)

ACCIDENT_COLUMNS = ("timestamp", "lat", "lon", "severity")
TRIP_COLUMNS = (
    "pickup_time",
    "pickup_lat",
    "pickup_lon",
    "dropoff_time",
    "dropoff_lat",
    "dropoff_lon",
)
POI_COLUMNS = ("lat", "lon", "category")
WEATHER_COLUMNS = ("timestamp", "temperature", "weather")
ROAD_COLUMNS = ("lat", "lon", "road_type")
N_ROAD_TYPES = 4


@dataclass(frozen=True)
class AccidentRecord:
    timestamp: datetime
    lat: float
    lon: float
    severity: str

    def __post_init__(self) -> None:
        if self.severity not in RISK_BY_SEVERITY:
            raise DataError(
                f"unknown severity '{self.severity}' (expected {', '.join(RISK_BY_SEVERITY)})"
            )

    @property
    def risk(self) -> int:
        return RISK_BY_SEVERITY[self.severity]


@dataclass(frozen=True)
class TripRecord:
    pickup_time: datetime
    pickup_lat: float
    pickup_lon: float
    dropoff_time: datetime
    dropoff_lat: float
    dropoff_lon: float

    def __post_init__(self) -> None:
        if self.dropoff_time < self.pickup_time:
            raise DataError("trip dropoff time precedes pickup time")


def build_risk_map(
    records: Iterable[AccidentRecord], grid: GridSpec, t: int, *, level: int = 1
) -> tuple[RiskMap, int]:
    """Sum severity risk per region; returns the map and the number of dropped records."""
    values = np.zeros(grid.n_regions, dtype=np.float64)
    dropped = 0
    for record in records:
        region = grid.locate(record.lat, record.lon)
        if region is None:
            dropped += 1
            continue
        values[region] += record.risk
    if dropped:
        logger.info("risk map interval=%d dropped=%d reason=out_of_bounds", t, dropped)
    return RiskMap(level=level, interval=t, values=values), dropped


def build_flows(
    trips: Iterable[TripRecord], grid: GridSpec, t: int
) -> tuple[np.ndarray, np.ndarray, int]:
    """
    Pickup in region a counts as outflow[a], dropoff in b as inflow[b].

    The caller filters trips to interval t; an endpoint outside the grid is
    skipped and counted, the other endpoint still counts.
    """
    inflow = np.zeros(grid.n_regions, dtype=np.float64)
    outflow = np.zeros(grid.n_regions, dtype=np.float64)
    dropped = 0
    for trip in trips:
        origin = grid.locate(trip.pickup_lat, trip.pickup_lon)
        dest = grid.locate(trip.dropoff_lat, trip.dropoff_lon)
        if origin is None:
            dropped += 1
        else:
            outflow[origin] += 1
        if dest is None:
            dropped += 1
        else:
            inflow[dest] += 1
    if dropped:
        logger.info("flows interval=%d dropped_endpoints=%d reason=out_of_bounds", t, dropped)
    return inflow, outflow, dropped


@dataclass(frozen=True)
class Dataset:
    grid: GridSpec
    start: datetime
    interval_hours: int
    risk: np.ndarray  # (T, N)
    inflow: np.ndarray  # (T, N)
    outflow: np.ndarray  # (T, N)
    poi: np.ndarray  # (N, 7), rows are distributions or all-zero
    road: np.ndarray  # (N, R), rows are distributions or all-zero
    temperature: np.ndarray  # (T,) raw degrees
    weather: np.ndarray  # (T,) integer codes into WEATHER_KINDS
    holidays: tuple[date, ...] = ()
    rs_tiles: np.ndarray | None = None  # (N, H, W, C) in [0, 1]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        t, n = self.risk.shape
        if n != self.grid.n_regions:
            raise DataError(f"risk has {n} regions, grid has {self.grid.n_regions}")
        for name in ("inflow", "outflow"):
            if getattr(self, name).shape != (t, n):
                raise DataError(f"{name} must have shape ({t}, {n})")
        if self.poi.shape != (n, len(POI_CATEGORIES)):
            raise DataError(f"poi must have shape ({n}, {len(POI_CATEGORIES)})")
        if self.road.ndim != 2 or self.road.shape[0] != n:
            raise DataError(f"road must have shape ({n}, R)")
        if self.temperature.shape != (t,) or self.weather.shape != (t,):
            raise DataError(f"temperature and weather must have shape ({t},)")
        if self.rs_tiles is not None and (self.rs_tiles.ndim != 4 or self.rs_tiles.shape[0] != n):
            raise DataError(f"rs_tiles must have shape ({n}, H, W, C)")

    @property
    def n_intervals(self) -> int:
        return int(self.risk.shape[0])

    @property
    def n_regions(self) -> int:
        return int(self.risk.shape[1])

    def timestamp(self, t: int) -> datetime:
        return self.start + timedelta(hours=t * self.interval_hours)

    def hour(self, t: int) -> int:
        return self.timestamp(t).hour

    def temporal(self, t: int) -> np.ndarray:
        return temporal_features(self.timestamp(t), frozenset(self.holidays))

    def risk_map(self, t: int) -> RiskMap:
        return RiskMap(level=1, interval=t, values=self.risk[t])

    def st_features(self, t: int, scaler: TemperatureScaler) -> np.ndarray:
        return assemble_st_features(
            self.risk[t],
            self.inflow[t],
            self.outflow[t],
            self.poi,
            float(scaler.transform(np.array([self.temperature[t]]))[0]),
            int(self.weather[t]),
            self.temporal(t),
        )

    def all_st_features(self, scaler: TemperatureScaler) -> np.ndarray:
        """(T, N, D_ST) for every interval."""
        return np.stack([self.st_features(t, scaler) for t in range(self.n_intervals)])


def split_dataset(
    d: Dataset, p: int, q: int, w: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Chronological 6:2:2 split over target intervals that have a full window.

    Validation and test get floor(20%) each; the remainder goes to train.
    """
    first = first_valid_target(p, q, w)
    targets = np.arange(first, d.n_intervals, dtype=np.int64)
    return split_targets(targets)


def split_targets(targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = int(targets.size)
    n_val = n * 2 // 10
    n_test = n * 2 // 10
    n_train = n - n_val - n_test
    if n == 0 or min(n_train, n_val, n_test) == 0:
        raise DataError(f"dataset too small: {n} target intervals cannot be split 6:2:2")
    train = targets[:n_train]
    val = targets[n_train : n_train + n_val]
    test = targets[n_train + n_val :]
    logger.debug("split train=%d val=%d test=%d", train.size, val.size, test.size)
    return train, val, test


def interval_of(timestamps: pd.Series, start: datetime, interval_hours: int) -> np.ndarray:
    delta = pd.to_datetime(timestamps) - pd.Timestamp(start)
    return np.floor(delta / pd.Timedelta(hours=interval_hours)).to_numpy().astype(np.int64)


def _require_columns(frame: pd.DataFrame, columns: Iterable[str], path: Path) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {', '.join(missing)}")


def _read_csv(path: Path, columns: Iterable[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path)
    except OSError as exc:
        raise DataError(f"{path}: cannot open file ({exc.strerror or 'unable to read'})") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    _require_columns(frame, columns, path)
    return frame


def _distribution(
    grid: GridSpec, lat: np.ndarray, lon: np.ndarray, codes: np.ndarray, width: int
) -> np.ndarray:
    regions = grid.locate_many(lat, lon)
    keep = (regions >= 0) & (codes >= 0) & (codes < width)
    counts = np.zeros((grid.n_regions, width), dtype=np.float64)
    np.add.at(counts, (regions[keep], codes[keep]), 1.0)
    return normalize_poi(counts)


def load_csv_dataset(directory: str | Path) -> Dataset:
    """
    Read a directory of CSV inputs.

    Required: grid.json {rows, cols, cell_width_m, cell_height_m, origin_lat,
    origin_lon, start, n_intervals, interval_hours}, accidents.csv
    (timestamp, lat, lon, severity), trips.csv (pickup_time, pickup_lat,
    pickup_lon, dropoff_time, dropoff_lat, dropoff_lon), poi.csv (lat, lon,
    category), weather.csv (timestamp, temperature, weather).
    Optional: roads.csv (lat, lon, road_type), holidays.csv (date),
    rs_tiles.f32 + rs_tiles.json.
    """
    directory = Path(directory)
    grid_info = storage.read_json(directory / "grid.json")
    try:
        grid = GridSpec(
            rows=int(grid_info["rows"]),
            cols=int(grid_info["cols"]),
            cell_width_m=float(grid_info.get("cell_width_m", 1000.0)),
            cell_height_m=float(grid_info.get("cell_height_m", 1000.0)),
            origin_lat=float(grid_info["origin_lat"]),
            origin_lon=float(grid_info["origin_lon"]),
        )
        start = datetime.fromisoformat(str(grid_info["start"]))
        n_intervals = int(grid_info["n_intervals"])
        interval_hours = int(grid_info.get("interval_hours", 1))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{directory / 'grid.json'}: {exc}") from exc
    n = grid.n_regions

    accidents = _read_csv(directory / "accidents.csv", ACCIDENT_COLUMNS)
    severity = accidents["severity"].astype(str).str.lower()
    unknown = ~severity.isin(list(RISK_BY_SEVERITY))
    if unknown.any():
        raise DataError(f"accidents.csv: unknown severity '{severity[unknown].iloc[0]}'")
    acc_t = interval_of(accidents["timestamp"], start, interval_hours)
    acc_r = grid.locate_many(accidents["lat"].to_numpy(), accidents["lon"].to_numpy())
    acc_keep = (acc_r >= 0) & (acc_t >= 0) & (acc_t < n_intervals)
    risk = np.zeros((n_intervals, n), dtype=np.float32)
    np.add.at(
        risk,
        (acc_t[acc_keep], acc_r[acc_keep]),
        severity[acc_keep].map(RISK_BY_SEVERITY).to_numpy(dtype=np.float32),
    )
    logger.info(
        "ingest accidents=%d kept=%d dropped=%d", len(accidents), acc_keep.sum(), (~acc_keep).sum()
    )

    trips = _read_csv(directory / "trips.csv", TRIP_COLUMNS)
    inflow = np.zeros((n_intervals, n), dtype=np.float32)
    outflow = np.zeros((n_intervals, n), dtype=np.float32)
    for prefix, target in (("pickup", outflow), ("dropoff", inflow)):
        t = interval_of(trips[f"{prefix}_time"], start, interval_hours)
        r = grid.locate_many(trips[f"{prefix}_lat"].to_numpy(), trips[f"{prefix}_lon"].to_numpy())
        keep = (r >= 0) & (t >= 0) & (t < n_intervals)
        np.add.at(target, (t[keep], r[keep]), 1.0)
        logger.info("ingest %s endpoints=%d dropped=%d", prefix, len(trips), (~keep).sum())

    poi_frame = _read_csv(directory / "poi.csv", POI_COLUMNS)
    poi_codes = (
        poi_frame["category"]
        .astype(str)
        .str.lower()
        .map({c: i for i, c in enumerate(POI_CATEGORIES)})
        .fillna(-1)
        .to_numpy(dtype=np.int64)
    )
    poi = _distribution(
        grid,
        poi_frame["lat"].to_numpy(),
        poi_frame["lon"].to_numpy(),
        poi_codes,
        len(POI_CATEGORIES),
    )

    road_path = directory / "roads.csv"
    if road_path.exists():
        roads = _read_csv(road_path, ROAD_COLUMNS)
        road = _distribution(
            grid,
            roads["lat"].to_numpy(),
            roads["lon"].to_numpy(),
            roads["road_type"].to_numpy(dtype=np.int64),
            N_ROAD_TYPES,
        )
    else:
        logger.warning("roads.csv missing; road view uses an all-zero descriptor")
        road = np.zeros((n, N_ROAD_TYPES), dtype=np.float32)

    weather_frame = _read_csv(directory / "weather.csv", WEATHER_COLUMNS)
    w_t = interval_of(weather_frame["timestamp"], start, interval_hours)
    temperature = np.zeros(n_intervals, dtype=np.float32)
    weather = np.zeros(n_intervals, dtype=np.int64)
    kinds = {k: i for i, k in enumerate(WEATHER_KINDS)}
    codes = weather_frame["weather"].astype(str).str.lower().map(kinds)
    if codes.isna().any():
        bad = weather_frame["weather"][codes.isna()].iloc[0]
        raise DataError(f"weather.csv: unknown weather '{bad}'")
    valid = (w_t >= 0) & (w_t < n_intervals)
    temperature[w_t[valid]] = weather_frame["temperature"].to_numpy(dtype=np.float32)[valid]
    weather[w_t[valid]] = codes.to_numpy(dtype=np.int64)[valid]
    covered = np.zeros(n_intervals, dtype=bool)
    covered[w_t[valid]] = True
    if not covered.all():
        logger.warning(
            "weather.csv missing intervals=%d of %d; filled as sunny at temperature 0.0",
            int((~covered).sum()),
            n_intervals,
        )

    holidays: tuple[date, ...] = ()
    holiday_path = directory / "holidays.csv"
    if holiday_path.exists():
        frame = _read_csv(holiday_path, ("date",))
        holidays = tuple(sorted(pd.to_datetime(frame["date"]).dt.date.unique()))

    rs_tiles = None
    if (directory / "rs_tiles.json").exists():
        rs_tiles = storage.read_tensor(directory, "rs_tiles")

    return Dataset(
        grid=grid,
        start=start,
        interval_hours=interval_hours,
        risk=risk,
        inflow=inflow,
        outflow=outflow,
        poi=poi,
        road=road,
        temperature=temperature,
        weather=weather,
        holidays=holidays,
        rs_tiles=rs_tiles,
    )


def save_dataset(d: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    for name in ("risk", "inflow", "outflow", "poi", "road", "temperature"):
        storage.write_tensor(directory, name, getattr(d, name))
    storage.write_tensor(directory, "weather", d.weather.astype(np.float32))
    if d.rs_tiles is not None:
        storage.write_tensor(directory, "rs_tiles", d.rs_tiles)
    storage.atomic_write_json(
        directory / "dataset.json",
        {
            "grid": {
                "rows": d.grid.rows,
                "cols": d.grid.cols,
                "cell_width_m": d.grid.cell_width_m,
                "cell_height_m": d.grid.cell_height_m,
                "origin_lat": d.grid.origin_lat,
                "origin_lon": d.grid.origin_lon,
            },
            "start": d.start.isoformat(),
            "interval_hours": d.interval_hours,
            "holidays": [h.isoformat() for h in d.holidays],
            "has_rs_tiles": d.rs_tiles is not None,
            "meta": d.meta,
        },
    )
    return directory / "dataset.json"


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    info = storage.read_json(directory / "dataset.json")
    grid = GridSpec(**info["grid"])
    tensors = {
        name: storage.read_tensor(directory, name)
        for name in ("risk", "inflow", "outflow", "poi", "road", "temperature", "weather")
    }
    return Dataset(
        grid=grid,
        start=datetime.fromisoformat(info["start"]),
        interval_hours=int(info["interval_hours"]),
        risk=tensors["risk"],
        inflow=tensors["inflow"],
        outflow=tensors["outflow"],
        poi=tensors["poi"],
        road=tensors["road"],
        temperature=tensors["temperature"],
        weather=tensors["weather"].astype(np.int64),
        holidays=tuple(date.fromisoformat(h) for h in info.get("holidays", [])),
        rs_tiles=storage.read_tensor(directory, "rs_tiles") if info.get("has_rs_tiles") else None,
        meta=dict(info.get("meta", {})),
    )
