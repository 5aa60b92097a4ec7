from __future__ import annotations

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, replace

import numpy as np
import torch

from hierrisk.config import HyperParams
from hierrisk.features import RISK, TRAFFIC, TemperatureScaler, aggregation_policy
from hierrisk.hierarchy import (
    GranularityHierarchy,
    aggregate_region_features,
    build_level_graphs,
    hierarchical_graph_clustering,
    uniform_clustering,
)
from hierrisk.ingest import Dataset, split_dataset
from hierrisk.remote_sensing import ConvAutoencoder, embed_rs, tiles_to_tensor
from hierrisk.similarity import (
    ViewAdjacency,
    build_view_adjacency,
    compose_graph_signals,
    view_descriptors,
)
from hierrisk.window import DataError, build_window, intervals_per_week

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LevelData:
    st: np.ndarray  # (T_all, N_g, D_ST), traffic columns scaled
    graph: np.ndarray | None  # (T_all, N_g, 3V)
    risk: np.ndarray  # (T_all, N_g), raw risk
    traffic_scale: np.ndarray  # (3,) divisor applied to risk, inflow, outflow

    @property
    def n_nodes(self) -> int:
        return int(self.risk.shape[1])


@dataclass(frozen=True)
class PreparedData:
    """Everything the network consumes, for every interval and level."""

    levels: tuple[LevelData, ...]
    temporal: np.ndarray  # (T_all, D_T)
    hours: np.ndarray  # (T_all,) local starting hour
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    p: int
    q: int
    intervals_per_week: int
    hierarchy: GranularityHierarchy

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split '{name}'")
        return getattr(self, name)

    def window(self, target: int) -> tuple[int, ...]:
        return build_window(target, self.p, self.q, self.intervals_per_week).indices


@dataclass(frozen=True)
class Batch:
    targets: np.ndarray
    st: list[torch.Tensor]  # per level, (B, T, N_g, D_ST)
    graph: list[torch.Tensor] | None  # per level, (B, T, N_g, 3V)
    temporal: torch.Tensor  # (B, D_T)
    truths: list[torch.Tensor]  # per level, (B, N_g)

    def to(self, dtype: torch.dtype) -> Batch:
        return replace(
            self,
            st=[x.to(dtype) for x in self.st],
            graph=None if self.graph is None else [x.to(dtype) for x in self.graph],
            temporal=self.temporal.to(dtype),
            truths=[x.to(dtype) for x in self.truths],
        )


def part_numbers_for(h: HyperParams, n_regions: int) -> tuple[int, ...]:
    return h.level_sizes(n_regions)[1 : h.active_levels]


def build_hierarchy(
    dataset: Dataset, h: HyperParams, encoder: ConvAutoencoder | None = None
) -> GranularityHierarchy:
    parts = part_numbers_for(h, dataset.n_regions)
    if not parts:
        return GranularityHierarchy(level_sizes=(dataset.n_regions,), partitions=())
    if h.clustering == "uniform":
        return uniform_clustering(dataset.grid, parts)
    if encoder is None or dataset.rs_tiles is None:
        logger.warning("no RS encoder or tiles; falling back to uniform clustering")
        return uniform_clustering(dataset.grid, parts)
    emb = embed_rs(dataset.rs_tiles, encoder, h.rs_tile)
    return hierarchical_graph_clustering(
        emb, dataset.grid, parts, tolerance=h.partition_tolerance, seed=h.seed
    )


def build_base_graphs(dataset: Dataset, h: HyperParams, history_end: int) -> list[ViewAdjacency]:
    """Level-1 view graphs; the risk view only sees intervals before `history_end`."""
    descriptors = view_descriptors(
        road=dataset.road,
        poi=dataset.poi,
        risk_history=dataset.risk[:history_end],
        thresholds=h.risk_level_thresholds,
        views=h.views,
    )
    return [build_view_adjacency(descriptors[v], h.top_k, v) for v in h.views]


def _scale_traffic(st: np.ndarray, train_end: int) -> tuple[np.ndarray, np.ndarray]:
    scale = st[:train_end, :, TRAFFIC].max(axis=(0, 1))
    scale = np.maximum(scale, 1.0).astype(np.float32)
    out = st.copy()
    out[..., TRAFFIC] = st[..., TRAFFIC] / scale
    return out, scale


def prepare(
    dataset: Dataset,
    h: HyperParams,
    hierarchy: GranularityHierarchy,
    base_graphs: Sequence[ViewAdjacency] | None = None,
) -> PreparedData:
    w = intervals_per_week(h.interval_hours)
    train, val, test = split_dataset(dataset, h.p, h.q, w)
    train_end = int(train[-1]) + 1
    n_levels = h.active_levels
    if hierarchy.n_levels < n_levels:
        raise DataError(f"hierarchy has {hierarchy.n_levels} levels, config needs {n_levels}")
    hierarchy = hierarchy.truncated(n_levels)

    scaler = TemperatureScaler.fit(dataset.temperature[:train_end])
    st = dataset.all_st_features(scaler)
    policy = aggregation_policy(st.shape[-1])
    raw = [st]
    for g, part in enumerate(hierarchy.partitions, start=1):
        raw.append(aggregate_region_features(raw[-1], part, policy, hierarchy.level_sizes[g]))

    graphs = None
    if h.use_graph_views:
        base = base_graphs if base_graphs is not None else build_base_graphs(dataset, h, train_end)
        graphs = build_level_graphs(base, hierarchy, h.top_k)

    levels = []
    for g, level_st in enumerate(raw):
        scaled, scale = _scale_traffic(level_st, train_end)
        signal = None
        if graphs is not None:
            signal = compose_graph_signals(graphs[g], scaled[..., TRAFFIC]).astype(np.float32)
        levels.append(
            LevelData(
                st=scaled.astype(np.float32),
                graph=signal,
                risk=level_st[..., RISK].astype(np.float32),
                traffic_scale=scale,
            )
        )
        logger.debug("level=%d nodes=%d scale=%s", g + 1, level_st.shape[1], scale.tolist())

    temporal = np.stack([dataset.temporal(t) for t in range(dataset.n_intervals)])
    hours = np.array([dataset.hour(t) for t in range(dataset.n_intervals)], dtype=np.int64)
    logger.info(
        "prepared levels=%d sizes=%s train=%d val=%d test=%d",
        n_levels,
        list(hierarchy.level_sizes),
        train.size,
        val.size,
        test.size,
    )
    return PreparedData(
        levels=tuple(levels),
        temporal=temporal.astype(np.float32),
        hours=hours,
        train=train,
        val=val,
        test=test,
        p=h.p,
        q=h.q,
        intervals_per_week=w,
        hierarchy=hierarchy,
    )


def make_batch(data: PreparedData, targets: Sequence[int] | np.ndarray) -> Batch:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise DataError("cannot build an empty batch")
    windows = np.array([data.window(int(t)) for t in targets])  # (B, T)
    st = [torch.from_numpy(level.st[windows]) for level in data.levels]
    graph = None
    if data.levels[0].graph is not None:
        graph = [torch.from_numpy(level.graph[windows]) for level in data.levels]
    return Batch(
        targets=targets,
        st=st,
        graph=graph,
        temporal=torch.from_numpy(data.temporal[targets]),
        truths=[torch.from_numpy(level.risk[targets]) for level in data.levels],
    )


def batch_targets(
    targets: np.ndarray, batch_size: int, rng: np.random.Generator | None = None
) -> list[np.ndarray]:
    """Chunks of target intervals, shuffled first when an rng is given."""
    order = rng.permutation(targets) if rng is not None else np.asarray(targets)
    return [order[i : i + batch_size] for i in range(0, order.size, batch_size)]


def iterate_batches(
    data: PreparedData,
    targets: np.ndarray,
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> Iterator[Batch]:
    for chunk in batch_targets(targets, batch_size, rng):
        yield make_batch(data, chunk)


def rs_tiles_tensor(dataset: Dataset, h: HyperParams) -> torch.Tensor | None:
    if not h.use_rs:
        return None
    if dataset.rs_tiles is None:
        raise DataError("dataset has no RS tiles; rerun with --no-rs")
    return tiles_to_tensor(dataset.rs_tiles, h.rs_tile)
