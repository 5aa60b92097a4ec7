from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from hierrisk import storage
from hierrisk.window import DataError

# Starting hours of 7:00-9:00 and 16:00-19:00, read as half-open ranges.
RUSH_HOURS = frozenset({7, 8, 16, 17, 18})


def _aligned(preds: np.ndarray, truths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.shape != truths.shape:
        raise DataError(f"prediction shape {preds.shape} vs truth {truths.shape}")
    if preds.shape[0] == 0:
        raise DataError("no intervals to score")
    return preds, truths


def rank_regions(pred: np.ndarray) -> np.ndarray:
    """Region indices by predicted risk, highest first; ties go to the lower index."""
    pred = np.asarray(pred)
    return np.lexsort((np.arange(pred.size), -pred))


def interval_recall(pred: np.ndarray, truth: np.ndarray) -> float | None:
    actual = np.flatnonzero(truth > 0)
    if actual.size == 0:
        return None
    top = rank_regions(pred)[: actual.size]
    return len(set(top.tolist()) & set(actual.tolist())) / actual.size


def interval_average_precision(pred: np.ndarray, truth: np.ndarray) -> float | None:
    """Precision summed over the first |R_t| ranks that hit, divided by |R_t|."""
    k = int((truth > 0).sum())
    if k == 0:
        return None
    rel = (truth[rank_regions(pred)[:k]] > 0).astype(np.float64)
    precision = np.cumsum(rel) / np.arange(1, k + 1)
    return float((precision * rel).sum() / k)


def rmse(preds: np.ndarray, truths: np.ndarray) -> float:
    preds, truths = _aligned(preds, truths)
    per_interval = ((preds - truths) ** 2).mean(axis=1)
    return math.sqrt(float(per_interval.mean()))


def _mean_skipping_empty(values: list[float | None]) -> float:
    kept = [v for v in values if v is not None]
    if not kept:
        raise DataError("every interval is accident-free; ranking metrics undefined")
    return float(np.mean(kept))


def recall(preds: np.ndarray, truths: np.ndarray) -> float:
    preds, truths = _aligned(preds, truths)
    return _mean_skipping_empty([interval_recall(p, t) for p, t in zip(preds, truths)])


def mean_average_precision(preds: np.ndarray, truths: np.ndarray) -> float:
    preds, truths = _aligned(preds, truths)
    return _mean_skipping_empty(
        [interval_average_precision(p, t) for p, t in zip(preds, truths)]
    )


def rush_hour_filter(
    intervals: Sequence[int] | np.ndarray, hours: Sequence[int] | np.ndarray
) -> np.ndarray:
    """Keep intervals whose starting hour (hours[t]) is a rush hour."""
    intervals = np.asarray(intervals, dtype=np.int64)
    hours = np.asarray(hours)
    return intervals[np.isin(hours[intervals], list(RUSH_HOURS))]


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    recall: float
    map: float
    rmse_rush: float | None = None
    recall_rush: float | None = None
    map_rush: float | None = None

    def __post_init__(self) -> None:
        for name in ("rmse", "rmse_rush"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise DataError(f"{name} must be >= 0, got {value}")
        for name in ("recall", "map", "recall_rush", "map_rush"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise DataError(f"{name} must be in [0, 1], got {value}")

    def to_dict(self) -> dict[str, float | None]:
        return asdict(self)

    def format_table(self) -> str:
        rows = [
            ("metric", "all", "rush"),
            ("RMSE", _fmt(self.rmse), _fmt(self.rmse_rush)),
            ("Recall", _fmt(self.recall), _fmt(self.recall_rush)),
            ("MAP", _fmt(self.map), _fmt(self.map_rush)),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = []
        for label, *cells in rows:
            padded = [label.ljust(widths[0])]
            padded += [cell.rjust(widths[i + 1]) for i, cell in enumerate(cells)]
            lines.append("  ".join(padded))
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        json_path = out_dir / f"{stem}.json"
        text_path = out_dir / f"{stem}.txt"
        storage.atomic_write_json(json_path, self.to_dict())
        storage.atomic_write_bytes(text_path, self.format_table().encode("utf-8"))
        return json_path, text_path


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.6f}"


def evaluate_predictions(
    preds: np.ndarray, truths: np.ndarray, intervals: np.ndarray, hours: np.ndarray
) -> MetricReport:
    """All six metrics; preds/truths rows align with `intervals`, hours is indexed by interval."""
    preds, truths = _aligned(preds, truths)
    intervals = np.asarray(intervals, dtype=np.int64)
    if intervals.size != preds.shape[0]:
        raise DataError(f"{intervals.size} intervals for {preds.shape[0]} prediction rows")
    rush = np.isin(np.asarray(hours)[intervals], list(RUSH_HOURS))
    rush_values: dict[str, float | None] = {}
    if rush.any():
        rush_values["rmse_rush"] = rmse(preds[rush], truths[rush])
    # Ranking metrics are undefined over accident-free intervals.
    if (truths[rush] > 0).any():
        rush_values["recall_rush"] = recall(preds[rush], truths[rush])
        rush_values["map_rush"] = mean_average_precision(preds[rush], truths[rush])
    return MetricReport(
        rmse=rmse(preds, truths),
        recall=recall(preds, truths),
        map=mean_average_precision(preds, truths),
        **rush_values,
    )


def interval_frame(
    preds: np.ndarray, truths: np.ndarray, intervals: np.ndarray, hours: np.ndarray
) -> pd.DataFrame:
    """One row of metric terms per interval."""
    preds, truths = _aligned(preds, truths)
    intervals = np.asarray(intervals, dtype=np.int64)
    hour = np.asarray(hours)[intervals]
    return pd.DataFrame(
        {
            "interval": intervals,
            "hour": hour,
            "rush": np.isin(hour, list(RUSH_HOURS)),
            "squared_error": ((preds - truths) ** 2).mean(axis=1),
            "accident_regions": (truths > 0).sum(axis=1),
            "recall": [interval_recall(p, t) for p, t in zip(preds, truths)],
            "average_precision": [
                interval_average_precision(p, t) for p, t in zip(preds, truths)
            ],
        }
    )


def write_interval_csv(path: str | Path, frame: pd.DataFrame) -> Path:
    storage.atomic_write_bytes(path, frame.to_csv(index=False).encode("utf-8"))
    return Path(path)
