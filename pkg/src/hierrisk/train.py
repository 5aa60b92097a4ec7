from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import matplotlib.pyplot as plt
import numpy as np
import torch

from hierrisk import storage
from hierrisk.config import ConfigError, HyperParams, config_hash, format_config
from hierrisk.features import RiskMap
from hierrisk.hierarchy import GranularityHierarchy
from hierrisk.ingest import Dataset, split_dataset
from hierrisk.metrics import MetricReport, evaluate_predictions
from hierrisk.model import HierRiskNet
from hierrisk.objective import (
    LossWeights,
    NonFiniteLossError,
    check_finite,
    combine_terms,
    loss_terms,
)
from hierrisk.pipeline import (
    Batch,
    PreparedData,
    batch_targets,
    iterate_batches,
    make_batch,
    prepare,
    rs_tiles_tensor,
)
from hierrisk.prefetch import Prefetcher
from hierrisk.similarity import ViewAdjacency
from hierrisk.window import DataError, build_window, intervals_per_week

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    epoch: int
    model_state: dict[str, Any]
    optimizer_state: dict[str, Any]
    seed: int
    best_val: float
    config_hash: str
    history: list[EpochRecord] = field(default_factory=list)

    def to_payload(self, h: HyperParams, hierarchy: GranularityHierarchy) -> dict[str, Any]:
        return {
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "model": self.model_state,
            "optimizer": self.optimizer_state,
            "seed": self.seed,
            "best_val": self.best_val,
            "config_hash": self.config_hash,
            "config": format_config(h),
            "history": [vars(r) for r in self.history],
            "hierarchy": hierarchy.to_json(),
        }

    @classmethod
    def from_payload(cls, payload: dict[str, Any]) -> TrainState:
        try:
            if int(payload["version"]) != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {payload['version']}")
            return cls(
                epoch=int(payload["epoch"]),
                model_state=payload["model"],
                optimizer_state=payload["optimizer"],
                seed=int(payload["seed"]),
                best_val=float(payload["best_val"]),
                config_hash=str(payload["config_hash"]),
                history=[EpochRecord(**r) for r in payload.get("history", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed checkpoint: {exc}") from exc


@dataclass
class TrainResult:
    model: HierRiskNet
    state: TrainState
    last_checkpoint: Path
    best_checkpoint: Path

    @property
    def history(self) -> list[EpochRecord]:
        return self.state.history


def build_model(
    h: HyperParams,
    data: PreparedData,
    grid_shape: tuple[int, int],
    rs_tiles: torch.Tensor | None = None,
) -> HierRiskNet:
    """A freshly initialised network; parameters depend only on h.seed."""
    torch.manual_seed(h.seed)
    return HierRiskNet(
        h,
        data.hierarchy.level_sizes,
        data.hierarchy.transform_matrices(),
        grid_shape,
        rs_tiles=rs_tiles,
    )


def make_optimizer(params: Iterable[torch.nn.Parameter], h: HyperParams) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=h.learning_rate)


def batch_loss(
    model: HierRiskNet, batch: Batch, weights: LossWeights
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    out = model(batch.st, batch.graph, batch.temporal)
    terms = loss_terms(out.preds, batch.truths, out.probs, model.transforms(), weights)
    return combine_terms(terms, weights), terms


def _model_dtype(model: torch.nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def split_loss(
    model: HierRiskNet, data: PreparedData, targets: np.ndarray, h: HyperParams
) -> float:
    """Sample-weighted mean total loss over `targets`."""
    if targets.size == 0:
        raise DataError("cannot compute a loss over an empty split")
    model.eval()
    weights = LossWeights.from_hyperparams(h)
    dtype = _model_dtype(model)
    total = 0.0
    for batch in iterate_batches(data, targets, h.batch_size):
        loss, _ = batch_loss(model, batch.to(dtype), weights)
        total += float(loss) * batch.targets.size
    return total / targets.size


def _save_state(
    path: Path, state: TrainState, h: HyperParams, hierarchy: GranularityHierarchy
) -> Path:
    return storage.save_checkpoint(path, state.to_payload(h, hierarchy))


def load_state(path: str | Path, h: HyperParams) -> TrainState:
    """Read a checkpoint; refuses one written under a different configuration."""
    state = TrainState.from_payload(storage.load_checkpoint(path))
    expected = config_hash(h)
    if state.config_hash != expected:
        raise ConfigError(
            f"{path}: checkpoint config hash {state.config_hash[:12]} "
            f"does not match current config {expected[:12]}"
        )
    return state


def fit(
    data: PreparedData,
    h: HyperParams,
    grid_shape: tuple[int, int],
    out_dir: str | Path,
    *,
    rs_tiles: torch.Tensor | None = None,
    resume_from: str | Path | None = None,
    prefetch: bool = True,
) -> TrainResult:
    """
    Adam over shuffled target-interval batches for h.epochs epochs.

    The last state is checkpointed after every epoch and the lowest
    validation loss is kept separately. Shuffling depends only on
    (seed, epoch), so resuming from a checkpoint continues the same run.
    """
    out_dir = Path(out_dir)
    last_path = out_dir / LAST_CHECKPOINT
    best_path = out_dir / BEST_CHECKPOINT
    model = build_model(h, data, grid_shape, rs_tiles)
    optimizer = make_optimizer(model.parameters(), h)
    weights = LossWeights.from_hyperparams(h)

    if resume_from is not None:
        state = load_state(resume_from, h)
        model.load_state_dict(state.model_state)
        optimizer.load_state_dict(state.optimizer_state)
        logger.info(
            "resume path=%s epoch=%d best_val=%.6f", resume_from, state.epoch, state.best_val
        )
    else:
        state = TrainState(
            epoch=0,
            model_state=model.state_dict(),
            optimizer_state=optimizer.state_dict(),
            seed=h.seed,
            best_val=math.inf,
            config_hash=config_hash(h),
        )
        _save_state(last_path, state, h, data.hierarchy)
        _save_state(best_path, state, h, data.hierarchy)

    dtype = _model_dtype(model)
    for epoch in range(state.epoch + 1, h.epochs + 1):
        model.train()
        rng = np.random.default_rng([h.seed, epoch])
        chunks = batch_targets(data.train, h.batch_size, rng)
        batches = (
            Prefetcher(chunks, lambda t: make_batch(data, t))
            if prefetch
            else (make_batch(data, t) for t in chunks)
        )
        total = 0.0
        for step, batch in enumerate(batches, start=1):
            optimizer.zero_grad(set_to_none=True)
            loss, terms = batch_loss(model, batch.to(dtype), weights)
            try:
                value = check_finite(loss, f"epoch {epoch} step {step}")
            except NonFiniteLossError:
                storage.dump_diagnostics(
                    out_dir,
                    "train",
                    {
                        "epoch": epoch,
                        "step": step,
                        "targets": batch.targets,
                        "terms": {k: float(v.detach()) for k, v in terms.items()},
                        "history": [vars(r) for r in state.history],
                    },
                )
                raise
            loss.backward()
            optimizer.step()
            total += value * batch.targets.size
            logger.debug("epoch=%d step=%d loss=%.6f", epoch, step, value)

        record = EpochRecord(
            epoch=epoch,
            train_loss=total / data.train.size,
            val_loss=split_loss(model, data, data.val, h),
        )
        state.history.append(record)
        state.epoch = epoch
        state.model_state = model.state_dict()
        state.optimizer_state = optimizer.state_dict()
        logger.info(
            "epoch=%d train_loss=%.6f val_loss=%.6f",
            epoch,
            record.train_loss,
            record.val_loss,
        )
        if record.val_loss < state.best_val:
            state.best_val = record.val_loss
            _save_state(best_path, state, h, data.hierarchy)
            logger.info("best epoch=%d val_loss=%.6f", epoch, record.val_loss)
        _save_state(last_path, state, h, data.hierarchy)

    return TrainResult(
        model=model, state=state, last_checkpoint=last_path, best_checkpoint=best_path
    )


def train(
    dataset: Dataset,
    hierarchy: GranularityHierarchy,
    h: HyperParams,
    out_dir: str | Path,
    *,
    base_graphs: Sequence[ViewAdjacency] | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    data = prepare(dataset, h, hierarchy, base_graphs)
    return fit(
        data,
        h,
        (dataset.grid.rows, dataset.grid.cols),
        out_dir,
        rs_tiles=rs_tiles_tensor(dataset, h),
        resume_from=resume_from,
    )


def restore_model(
    checkpoint: str | Path,
    h: HyperParams,
    data: PreparedData,
    grid_shape: tuple[int, int],
    rs_tiles: torch.Tensor | None = None,
) -> HierRiskNet:
    state = load_state(checkpoint, h)
    model = build_model(h, data, grid_shape, rs_tiles)
    model.load_state_dict(state.model_state)
    model.eval()
    return model


@torch.no_grad()
def predict_targets(
    model: HierRiskNet, data: PreparedData, targets: Sequence[int] | np.ndarray, batch_size: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per level, (len(targets), N_g) risk predictions clipped at 0, and probabilities."""
    model.eval()
    dtype = _model_dtype(model)
    preds: list[list[np.ndarray]] = [[] for _ in range(data.n_levels)]
    probs: list[list[np.ndarray]] = [[] for _ in range(data.n_levels)]
    for batch in iterate_batches(data, np.asarray(targets, dtype=np.int64), batch_size):
        batch = batch.to(dtype)
        out = model(batch.st, batch.graph, batch.temporal)
        for g in range(data.n_levels):
            preds[g].append(out.preds[g].clamp_min(0).double().numpy())
            probs[g].append(out.probs[g].double().numpy())
    return [np.concatenate(p) for p in preds], [np.concatenate(p) for p in probs]


def evaluate(
    model: HierRiskNet, data: PreparedData, split: str, h: HyperParams
) -> MetricReport:
    """All six metrics on the finest level of one split."""
    targets = data.split(split)
    if targets.size == 0:
        raise DataError(f"split '{split}' is empty")
    preds, _ = predict_targets(model, data, targets, h.batch_size)
    truths = data.levels[0].risk[targets]
    report = evaluate_predictions(preds[0], truths, targets, data.hours)
    logger.info("eval split=%s rmse=%.6f recall=%.6f map=%.6f", split, *_headline(report))
    return report


def _headline(report: MetricReport) -> tuple[float, float, float]:
    return report.rmse, report.recall, report.map


@dataclass(frozen=True)
class Prediction:
    target: int
    maps: tuple[RiskMap, ...]
    probabilities: tuple[np.ndarray, ...]

    def save(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        written = []
        for risk_map, prob in zip(self.maps, self.probabilities):
            level = risk_map.level
            written.append(
                storage.write_tensor(
                    out_dir, storage.tensor_name("prediction", level), risk_map.values
                )
            )
            written.append(
                storage.write_tensor(out_dir, storage.tensor_name("probability", level), prob)
            )
        return written


def predict(model: HierRiskNet, data: PreparedData, target: int) -> Prediction:
    """Risk map per level and occurrence probabilities for one target interval."""
    build_window(target, data.p, data.q, data.intervals_per_week)
    if target >= data.levels[0].risk.shape[0]:
        raise DataError(f"target={target} is past the last interval")
    preds, probs = predict_targets(model, data, [target], batch_size=1)
    maps = tuple(
        RiskMap(level=g + 1, interval=target, values=preds[g][0]) for g in range(data.n_levels)
    )
    return Prediction(target=target, maps=maps, probabilities=tuple(p[0] for p in probs))


def render_heatmap(path: str | Path, risk_map: RiskMap, grid_shape: tuple[int, int]) -> Path:
    """One pixel per cell, row-major like the region index."""
    rows, cols = grid_shape
    if risk_map.values.size != rows * cols:
        raise DataError(f"risk map has {risk_map.values.size} regions, grid is {rows}x{cols}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, risk_map.values.reshape(rows, cols), cmap="inferno", vmin=0.0)
    return path


def historical_average_baseline(
    risk: np.ndarray, targets: Sequence[int] | np.ndarray, p: int, q: int, w: int
) -> np.ndarray:
    """(len(targets), N): each region's mean over the target's window intervals."""
    risk = np.asarray(risk, dtype=np.float64)
    rows = [risk[list(build_window(int(t), p, q, w).indices)].mean(axis=0) for t in targets]
    if not rows:
        raise DataError("no target intervals for the baseline")
    return np.stack(rows)


def baseline_report(dataset: Dataset, h: HyperParams, split: str = "test") -> MetricReport:
    w = intervals_per_week(h.interval_hours)
    splits = dict(zip(("train", "val", "test"), split_dataset(dataset, h.p, h.q, w)))
    if split not in splits:
        raise DataError(f"unknown split '{split}'")
    targets = splits[split]
    preds = historical_average_baseline(dataset.risk, targets, h.p, h.q, w)
    hours = np.array([dataset.hour(t) for t in range(dataset.n_intervals)])
    return evaluate_predictions(preds, dataset.risk[targets], targets, hours)
