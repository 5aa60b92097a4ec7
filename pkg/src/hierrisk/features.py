from __future__ import annotations

from collections.abc import Container
from dataclasses import dataclass
from datetime import datetime
from typing import Literal, TypeVar

import numpy as np
import torch

from hierrisk.window import DataError

Policy = Literal["max", "mean", "sum"]
ArrayT = TypeVar("ArrayT", np.ndarray, torch.Tensor)

WEATHER_KINDS = ("sunny", "rainy", "cloudy", "snowy", "foggy")
POI_CATEGORIES = (
    "residence",
    "school",
    "culture",
    "recreation",
    "social_service",
    "transportation",
    "commercial",
)
RISK_BY_SEVERITY = {"minor": 1, "injured": 2, "fatal": 3}

# Column layout of one ST row.
HOUR = slice(0, 24)
DOW = slice(24, 31)
HOLIDAY = 31
D_T = 32
POI = slice(32, 39)
TEMPERATURE = 39
WEATHER = slice(40, 45)
RISK = 45
INFLOW = 46
OUTFLOW = 47
D_S = 16
D_ST = D_T + D_S
TRAFFIC = slice(RISK, OUTFLOW + 1)


@dataclass(frozen=True)
class RiskMap:
    level: int
    interval: int
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DataError("risk map values must be a vector")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DataError("risk map values must be finite and >= 0")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def total(self) -> float:
        return float(self.values.sum())


def temporal_features(when: datetime, holidays: Container = ()) -> np.ndarray:
    """Hour one-hot (24) | day-of-week one-hot (7) | holiday flag (1)."""
    out = np.zeros(D_T, dtype=np.float32)
    out[HOUR.start + when.hour] = 1.0
    out[DOW.start + when.weekday()] = 1.0
    out[HOLIDAY] = 1.0 if when.date() in holidays else 0.0
    return out


def weather_one_hot(code: int) -> np.ndarray:
    if not 0 <= code < len(WEATHER_KINDS):
        raise DataError(f"weather code {code} outside [0, {len(WEATHER_KINDS)})")
    out = np.zeros(len(WEATHER_KINDS), dtype=np.float32)
    out[code] = 1.0
    return out


def normalize_poi(counts: np.ndarray) -> np.ndarray:
    """Row-normalize POI counts to a distribution; all-zero rows stay zero."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=-1, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    return (counts / safe).astype(np.float32)


@dataclass(frozen=True)
class TemperatureScaler:
    low: float
    high: float

    @classmethod
    def fit(cls, temperatures: np.ndarray) -> TemperatureScaler:
        temperatures = np.asarray(temperatures, dtype=np.float64)
        if temperatures.size == 0:
            raise DataError("cannot fit temperature scaler on an empty split")
        return cls(float(temperatures.min()), float(temperatures.max()))

    def transform(self, temperatures: np.ndarray) -> np.ndarray:
        span = self.high - self.low
        if span <= 0:
            return np.zeros_like(np.asarray(temperatures, dtype=np.float32))
        return ((np.asarray(temperatures, dtype=np.float64) - self.low) / span).astype(np.float32)


def assemble_st_features(
    risk: np.ndarray | RiskMap,
    inflow: np.ndarray,
    outflow: np.ndarray,
    poi: np.ndarray,
    temperature: float,
    weather: int | np.ndarray,
    temporal: np.ndarray,
) -> np.ndarray:
    """
    Row i = [temporal | poi_i | temperature | weather | risk_i | inflow_i | outflow_i].

    Climate and temporal blocks are city-wide and repeated on every row.
    """
    risk_values = risk.values if isinstance(risk, RiskMap) else np.asarray(risk)
    n = risk_values.shape[0]
    inflow = np.asarray(inflow)
    outflow = np.asarray(outflow)
    poi = np.asarray(poi)
    temporal = np.asarray(temporal)
    if inflow.shape != (n,) or outflow.shape != (n,):
        raise DataError(f"flow vectors must have shape ({n},)")
    if poi.shape != (n, POI.stop - POI.start):
        raise DataError(f"poi matrix must have shape ({n}, {POI.stop - POI.start})")
    if temporal.shape != (D_T,):
        raise DataError(f"temporal features must have length {D_T}")
    weather_vec = weather_one_hot(int(weather)) if np.ndim(weather) == 0 else np.asarray(weather)
    if weather_vec.shape != (len(WEATHER_KINDS),):
        raise DataError(f"weather must be a code or a {len(WEATHER_KINDS)}-vector")

    out = np.zeros((n, D_ST), dtype=np.float32)
    out[:, :D_T] = temporal
    out[:, POI] = poi
    out[:, TEMPERATURE] = temperature
    out[:, WEATHER] = weather_vec
    out[:, RISK] = risk_values
    out[:, INFLOW] = inflow
    out[:, OUTFLOW] = outflow
    return out


def enhance_features(st: ArrayT, f_rs: ArrayT) -> ArrayT:
    """
    Append remote-sensing channels after the ST block.

    f_rs is (..., N, d_a) and broadcasts over the leading axes of st, so one
    feature row per region serves every interval of a window. Works on numpy
    arrays and on torch tensors (the latter keeps the autograd graph).
    """
    if not isinstance(st, torch.Tensor):
        st, f_rs = np.asarray(st), np.asarray(f_rs)
    lead = tuple(st.shape[:-1])
    rows = tuple(f_rs.shape[:-1])
    if not rows or len(rows) > len(lead) or lead[len(lead) - len(rows) :] != rows:
        raise DataError(f"row mismatch: st {tuple(st.shape)} vs f_rs {tuple(f_rs.shape)}")
    if isinstance(st, torch.Tensor):
        rs = f_rs.to(st.dtype).expand(*lead, f_rs.shape[-1])
        return torch.cat([st, rs], dim=-1)
    rs = np.broadcast_to(f_rs.astype(st.dtype), (*lead, f_rs.shape[-1]))
    return np.concatenate([st, rs], axis=-1)


def aggregation_policy(width: int = D_ST) -> tuple[Policy, ...]:
    """
    Per-column policy for an ST row of the given width.

    max keeps every weather condition and holiday, sum conserves traffic
    counts, everything else (temporal one-hots, POI, temperature, RS
    channels) is averaged.
    """
    if width < D_ST:
        raise DataError(f"ST width {width} smaller than {D_ST}")
    policy: list[Policy] = ["mean"] * width
    policy[HOLIDAY] = "max"
    for col in range(WEATHER.start, WEATHER.stop):
        policy[col] = "max"
    for col in (RISK, INFLOW, OUTFLOW):
        policy[col] = "sum"
    return tuple(policy)


def risk_levels(values: np.ndarray, thresholds: tuple[float, ...] = (0.0, 2.0, 4.0)) -> np.ndarray:
    """
    Level index 0..3 per value: 0 for values <= t0, 1 for (t0, t1], 2 for
    (t1, t2], 3 above t2.
    """
    return np.digitize(np.asarray(values, dtype=np.float64), thresholds, right=True)
