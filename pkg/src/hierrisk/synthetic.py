from __future__ import annotations

import logging
from datetime import date, datetime, timedelta

import numpy as np

from hierrisk.features import POI_CATEGORIES, WEATHER_KINDS, normalize_poi
from hierrisk.grid import GridSpec
from hierrisk.ingest import N_ROAD_TYPES, Dataset
from hierrisk.metrics import RUSH_HOURS
from hierrisk.window import DataError

logger = logging.getLogger(__name__)

DEFAULT_START = datetime(2023, 1, 2)  # a Monday
SEVERITY_PROBS = (0.6, 0.3, 0.1)
BASE_RATE = 0.6
TILE_SIZE = 32
HOLIDAYS_2023 = (
    date(2023, 1, 2),
    date(2023, 1, 16),
    date(2023, 2, 20),
    date(2023, 5, 29),
    date(2023, 7, 4),
    date(2023, 9, 4),
    date(2023, 11, 23),
    date(2023, 12, 25),
)

# Weather transition matrix (rows sum to 1), same order as WEATHER_KINDS.
_WEATHER_TRANSITIONS = np.array(
    [
        [0.90, 0.03, 0.05, 0.01, 0.01],
        [0.10, 0.80, 0.08, 0.01, 0.01],
        [0.12, 0.05, 0.80, 0.02, 0.01],
        [0.05, 0.02, 0.08, 0.84, 0.01],
        [0.20, 0.02, 0.08, 0.00, 0.70],
    ]
)
_WEATHER_FACTOR = np.array([1.0, 1.35, 1.05, 1.5, 1.3])


def hour_intensity(hour: int) -> float:
    """Relative accident intensity by hour of day; peaks in 7-9 and 16-19."""
    if hour in RUSH_HOURS:
        return 1.0
    if 0 <= hour < 6:
        return 0.12
    if hour in (6, 9, 15, 19):
        return 0.6
    return 0.4


def _density_field(grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(grid.rows), np.arange(grid.cols), indexing="ij")
    field = np.zeros((grid.rows, grid.cols))
    n_centers = 3 + int(rng.integers(0, 2))
    scale = max(grid.rows, grid.cols)
    for _ in range(n_centers):
        cr = rng.uniform(0, grid.rows - 1)
        cc = rng.uniform(0, grid.cols - 1)
        width = rng.uniform(0.12, 0.25) * scale
        height = rng.uniform(0.6, 1.0)
        field += height * np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * width**2))
    field = field / field.max()
    return field.reshape(-1)


def _poi_counts(density: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = density.size
    totals = rng.poisson(40.0 * density**1.5)
    # Dense cells lean commercial/transport, sparse cells residential/recreation.
    urban = np.array([0.10, 0.08, 0.12, 0.05, 0.10, 0.20, 0.35])
    rural = np.array([0.45, 0.15, 0.05, 0.25, 0.05, 0.02, 0.03])
    counts = np.zeros((n, len(POI_CATEGORIES)), dtype=np.int64)
    for i in range(n):
        mix = density[i] * urban + (1 - density[i]) * rural
        counts[i] = rng.multinomial(totals[i], mix / mix.sum())
    return counts


def _road_distribution(density: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # highway, arterial, local, residential
    out = np.zeros((density.size, N_ROAD_TYPES), dtype=np.float32)
    for i, d in enumerate(density):
        alpha = np.array([0.5 + 2.0 * d, 1.0 + 3.0 * d, 2.0, 3.0 * (1.0 - d) + 0.5])
        out[i] = rng.dirichlet(alpha)
    return out


def tile_group(density: np.ndarray) -> np.ndarray:
    """0 = open land, 1 = suburban, 2 = dense urban."""
    return np.digitize(density, [0.25, 0.6]).astype(np.int64)


def _rs_tile(d: float, rng: np.random.Generator, size: int = TILE_SIZE) -> np.ndarray:
    green = np.array([0.25, 0.55, 0.25])
    grey = np.array([0.55, 0.55, 0.58])
    base = (1 - d) * green + d * grey
    tile = np.broadcast_to(base, (size, size, 3)).copy()
    # Street raster: denser cells get a finer street period.
    period = max(3, int(round(12 - 9 * d)))
    offset = int(rng.integers(0, period))
    streets = ((np.arange(size) + offset) % period) == 0
    strength = 0.35 * d
    tile[streets, :, :] -= strength
    tile[:, streets, :] -= strength
    tile += rng.normal(0.0, 0.04, size=tile.shape)
    return np.clip(tile, 0.0, 1.0).astype(np.float32)


def generate_synthetic_city(
    seed: int,
    grid: GridSpec,
    weeks: int,
    *,
    q: int = 4,
    start: datetime = DEFAULT_START,
    tile_size: int = TILE_SIZE,
) -> Dataset:
    """
    Deterministic hourly city: accidents, flows, weather, POIs and RS tiles.

    Accident counts are Poisson with a region rate tied to POI density and an
    hour-of-day profile, so most region-intervals are zero.
    """
    if weeks < q + 1:
        raise DataError(f"weeks={weeks} must be >= q + 1 = {q + 1}")
    rng = np.random.default_rng(seed)
    n = grid.n_regions
    n_intervals = weeks * 7 * 24

    density = _density_field(grid, rng)
    poi = normalize_poi(_poi_counts(density, rng))
    road = _road_distribution(density, rng)
    region_rate = BASE_RATE * (0.1 + density)

    end = start + timedelta(hours=n_intervals)
    timestamps = [start + timedelta(hours=t) for t in range(n_intervals)]
    hours = np.array([ts.hour for ts in timestamps])
    weekend = np.array([ts.weekday() >= 5 for ts in timestamps])
    holiday_set = set(HOLIDAYS_2023)
    holiday = np.array([ts.date() in holiday_set for ts in timestamps])

    weather = np.zeros(n_intervals, dtype=np.int64)
    for t in range(1, n_intervals):
        weather[t] = rng.choice(len(WEATHER_KINDS), p=_WEATHER_TRANSITIONS[weather[t - 1]])
    day = np.arange(n_intervals) / 24.0
    temperature = (
        2.0
        + 6.0 * np.sin(2 * np.pi * (day - 30) / 365.0)
        + 4.0 * np.sin(2 * np.pi * (hours - 9) / 24.0)
        + rng.normal(0.0, 1.0, n_intervals)
    ).astype(np.float32)

    time_factor = np.array([hour_intensity(h) for h in hours])
    time_factor = time_factor * np.where(weekend, 0.7, 1.0) * np.where(holiday, 0.8, 1.0)
    time_factor = time_factor * _WEATHER_FACTOR[weather]
    rate = time_factor[:, None] * region_rate[None, :]

    n_accidents = rng.poisson(rate)
    severities = rng.multinomial(n_accidents, SEVERITY_PROBS)
    risk = (severities @ np.array([1, 2, 3])).astype(np.float32)

    # Trips: pickups scale with density and hour; dropoffs land by attractiveness.
    trip_rate = 3.0 * (0.2 + density)[None, :] * (0.3 + time_factor[:, None])
    outflow = rng.poisson(trip_rate).astype(np.float32)
    attract = (0.2 + density) / (0.2 + density).sum()
    inflow = np.stack(
        [rng.multinomial(int(outflow[t].sum()), attract) for t in range(n_intervals)]
    ).astype(np.float32)

    rs_tiles = np.stack([_rs_tile(float(d), rng, tile_size) for d in density])

    zero_fraction = float((risk == 0).mean())
    logger.info(
        "synthetic city seed=%d regions=%d intervals=%d accidents=%d zero_fraction=%.3f",
        seed,
        n,
        n_intervals,
        int(n_accidents.sum()),
        zero_fraction,
    )
    return Dataset(
        grid=grid,
        start=start,
        interval_hours=1,
        risk=risk,
        inflow=inflow,
        outflow=outflow,
        poi=poi,
        road=road,
        temperature=temperature,
        weather=weather,
        holidays=tuple(h for h in HOLIDAYS_2023 if start.date() <= h < end.date()),
        rs_tiles=rs_tiles,
        meta={
            "generator": "synthetic",
            "seed": seed,
            "density": density.round(6).tolist(),
            "tile_group": tile_group(density).tolist(),
        },
    )
