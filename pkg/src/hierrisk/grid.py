from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    cell_width_m: float = 1000.0
    cell_height_m: float = 1000.0
    origin_lat: float = 40.70
    origin_lon: float = -74.02

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid rows and cols must be >= 1")
        if self.cell_width_m <= 0 or self.cell_height_m <= 0:
            raise ValueError("grid cell extent must be > 0")

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def cell(self, region: int) -> tuple[int, int]:
        if not 0 <= region < self.n_regions:
            raise ValueError(f"region {region} outside [0, {self.n_regions})")
        return divmod(region, self.cols)

    # Origin is the south-west corner; rows grow northwards, cols eastwards.
    def _deg_per_cell(self) -> tuple[float, float]:
        dlat = self.cell_height_m / 111_320.0
        dlon = self.cell_width_m / (111_320.0 * math.cos(math.radians(self.origin_lat)))
        return dlat, dlon

    def bounds(self) -> tuple[float, float, float, float]:
        """(min_lat, min_lon, max_lat, max_lon)"""
        dlat, dlon = self._deg_per_cell()
        return (
            self.origin_lat,
            self.origin_lon,
            self.origin_lat + self.rows * dlat,
            self.origin_lon + self.cols * dlon,
        )

    def locate(self, lat: float, lon: float) -> int | None:
        """Region index containing (lat, lon), or None outside the bounding box."""
        dlat, dlon = self._deg_per_cell()
        row = math.floor((lat - self.origin_lat) / dlat)
        col = math.floor((lon - self.origin_lon) / dlon)
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row * self.cols + col
        return None

    def center(self, region: int) -> tuple[float, float]:
        row, col = self.cell(region)
        dlat, dlon = self._deg_per_cell()
        return self.origin_lat + (row + 0.5) * dlat, self.origin_lon + (col + 0.5) * dlon

    def neighbors(self, region: int) -> list[int]:
        """4-neighbourhood, ascending region index."""
        row, col = self.cell(region)
        out = []
        for dr, dc in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            r, c = row + dr, col + dc
            if 0 <= r < self.rows and 0 <= c < self.cols:
                out.append(r * self.cols + c)
        return out

    def edges(self) -> list[tuple[int, int]]:
        """Undirected 4-neighbourhood edges as (i, j) with i < j."""
        out = []
        for i in range(self.n_regions):
            for j in self.neighbors(i):
                if i < j:
                    out.append((i, j))
        return out

    def locate_many(self, lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
        """Vectorised locate; -1 marks points outside the bounding box."""
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        dlat, dlon = self._deg_per_cell()
        row = np.floor((lat - self.origin_lat) / dlat)
        col = np.floor((lon - self.origin_lon) / dlon)
        inside = (row >= 0) & (row < self.rows) & (col >= 0) & (col < self.cols)
        inside &= np.isfinite(row) & np.isfinite(col)
        out = np.full(lat.shape, -1, dtype=np.int64)
        out[inside] = (row[inside] * self.cols + col[inside]).astype(np.int64)
        return out
