from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np

from hierrisk import storage
from hierrisk.config import ConfigError
from hierrisk.features import Policy
from hierrisk.grid import GridSpec
from hierrisk.partition import balanced_partition
from hierrisk.similarity import ViewAdjacency
from hierrisk.window import DataError

logger = logging.getLogger(__name__)

HIERARCHY_VERSION = 1


@dataclass(frozen=True)
class RSSimilarityGraph:
    """Spatial-adjacency graph weighted by embedding cosine similarity."""

    n_nodes: int
    edges: tuple[tuple[int, int, float], ...]

    def weight(self, i: int, j: int) -> float | None:
        a, b = min(i, j), max(i, j)
        for u, v, w in self.edges:
            if (u, v) == (a, b):
                return w
        return None

    def to_networkx(self) -> nx.Graph:
        """Undirected copy for partitioning; negative weights are clamped to 0."""
        graph = nx.Graph()
        graph.add_nodes_from(range(self.n_nodes))
        graph.add_weighted_edges_from((u, v, max(w, 0.0)) for u, v, w in self.edges)
        return graph


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors; 0 when either has zero norm."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _similarity_graph(emb: np.ndarray, pairs: Sequence[tuple[int, int]]) -> RSSimilarityGraph:
    emb = np.asarray(emb, dtype=np.float64)
    if not np.all(np.isfinite(emb)):
        raise DataError("embeddings contain non-finite values")
    edges = tuple((i, j, cosine_similarity(emb[i], emb[j])) for i, j in pairs)
    return RSSimilarityGraph(n_nodes=int(emb.shape[0]), edges=edges)


def build_rs_similarity_graph(emb: np.ndarray, grid: GridSpec) -> RSSimilarityGraph:
    if emb.ndim != 2 or emb.shape[0] != grid.n_regions:
        raise DataError(f"embedding has {emb.shape[0]} rows, grid has {grid.n_regions} regions")
    return _similarity_graph(emb, grid.edges())


def coarse_edges(
    graph: RSSimilarityGraph, membership: Sequence[int]
) -> tuple[tuple[int, int], ...]:
    """Cluster pairs joined by at least one fine edge."""
    pairs = set()
    for u, v, _ in graph.edges:
        a, b = membership[u], membership[v]
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    return tuple(sorted(pairs))


@dataclass(frozen=True)
class GranularityHierarchy:
    """
    Aggregation relation between levels, finest first.

    partitions[i][r] is the level-(i+2) node that level-(i+1) node r belongs to.
    """

    level_sizes: tuple[int, ...]
    partitions: tuple[tuple[int, ...], ...]
    method: str = "rs"

    def __post_init__(self) -> None:
        if len(self.partitions) != len(self.level_sizes) - 1:
            raise DataError("hierarchy needs one partition per adjacent level pair")
        for i, part in enumerate(self.partitions):
            fine, coarse = self.level_sizes[i], self.level_sizes[i + 1]
            if len(part) != fine:
                raise DataError(f"partition {i + 1} covers {len(part)} of {fine} nodes")
            if set(part) != set(range(coarse)):
                raise DataError(f"partition {i + 1} does not map onto {coarse} clusters")

    @property
    def n_levels(self) -> int:
        return len(self.level_sizes)

    def transform_matrix(self, level: int) -> np.ndarray:
        """M_tran from level `level` to `level + 1` (levels are 1-based)."""
        if not 1 <= level < self.n_levels:
            raise DataError(f"no transform from level {level}")
        return build_transform_matrix(self.partitions[level - 1], self.level_sizes[level])

    def transform_matrices(self) -> list[np.ndarray]:
        return [self.transform_matrix(g) for g in range(1, self.n_levels)]

    def membership(self, level: int) -> np.ndarray:
        """Level-`level` node of every finest region."""
        labels = np.arange(self.level_sizes[0])
        for part in self.partitions[: level - 1]:
            labels = np.asarray(part)[labels]
        return labels

    def truncated(self, n_levels: int) -> GranularityHierarchy:
        return GranularityHierarchy(
            level_sizes=self.level_sizes[:n_levels],
            partitions=self.partitions[: n_levels - 1],
            method=self.method,
        )

    def to_json(self) -> dict:
        transforms = []
        for g, part in enumerate(self.partitions, start=1):
            transforms.append(
                {
                    "from_level": g,
                    "shape": [self.level_sizes[g - 1], self.level_sizes[g]],
                    "rows": list(range(len(part))),
                    "cols": list(part),
                }
            )
        return {
            "version": HIERARCHY_VERSION,
            "method": self.method,
            "level_sizes": list(self.level_sizes),
            "partitions": [list(p) for p in self.partitions],
            "transforms": transforms,
        }

    @classmethod
    def from_json(cls, payload: dict) -> GranularityHierarchy:
        try:
            if int(payload["version"]) != HIERARCHY_VERSION:
                raise DataError(f"unsupported hierarchy version {payload['version']}")
            hierarchy = cls(
                level_sizes=tuple(int(s) for s in payload["level_sizes"]),
                partitions=tuple(tuple(int(c) for c in p) for p in payload["partitions"]),
                method=str(payload.get("method", "rs")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed hierarchy document: {exc}") from exc
        for entry in payload.get("transforms", []):
            g = int(entry["from_level"])
            if list(entry["cols"]) != list(hierarchy.partitions[g - 1]):
                raise DataError(f"transform {g} disagrees with partition {g}")
        return hierarchy

    def save(self, path: str | Path) -> None:
        storage.atomic_write_json(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> GranularityHierarchy:
        return cls.from_json(storage.read_json(path))


def build_transform_matrix(membership: Sequence[int], n_coarse: int | None = None) -> np.ndarray:
    """M[i, j] = 1 iff fine node i belongs to coarse node j."""
    labels = np.asarray(membership, dtype=np.int64)
    n_coarse = int(labels.max()) + 1 if n_coarse is None else n_coarse
    matrix = np.zeros((labels.size, n_coarse), dtype=np.float64)
    matrix[np.arange(labels.size), labels] = 1.0
    return matrix


def average_aggregate(emb: np.ndarray, membership: Sequence[int], n_coarse: int) -> np.ndarray:
    m = build_transform_matrix(membership, n_coarse)
    counts = m.sum(axis=0)
    if np.any(counts == 0):
        raise DataError("empty cluster in aggregation")
    return (m.T @ np.asarray(emb, dtype=np.float64)) / counts[:, None]


def _check_part_numbers(grid: GridSpec, part_numbers: Sequence[int]) -> tuple[int, ...]:
    """Level sizes N > P_1 > ... > P_m >= 1; a level as large as its parent merges nothing."""
    sizes = (grid.n_regions, *part_numbers)
    if not part_numbers or part_numbers[-1] < 1 or any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(
            f"part numbers {tuple(part_numbers)} must strictly decrease below N={grid.n_regions}"
        )
    return sizes


def hierarchical_graph_clustering(
    emb: np.ndarray,
    grid: GridSpec,
    part_numbers: Sequence[int],
    *,
    tolerance: int = 1,
    seed: int = 0,
) -> GranularityHierarchy:
    """
    Cluster regions level by level on their RS similarity graph.

    Each level's graph is partitioned into the next part count, embeddings
    are averaged per cluster, and the next graph joins clusters that touch.
    """
    sizes = _check_part_numbers(grid, part_numbers)
    graph = build_rs_similarity_graph(np.asarray(emb), grid)
    current = np.asarray(emb, dtype=np.float64)
    partitions: list[tuple[int, ...]] = []
    for level, k in enumerate(part_numbers, start=1):
        result = balanced_partition(graph.to_networkx(), k, tolerance, seed=seed)
        partitions.append(result.membership)
        logger.info(
            "cluster level=%d nodes=%d parts=%d cut=%.4f",
            level,
            graph.n_nodes,
            k,
            result.cut_weight,
        )
        current = average_aggregate(current, result.membership, k)
        graph = _similarity_graph(current, coarse_edges(graph, result.membership))
    return GranularityHierarchy(level_sizes=sizes, partitions=tuple(partitions), method="rs")


def _block_shape(n: int, rows: int, cols: int) -> tuple[int, int]:
    best: tuple[int, int] | None = None
    best_score = np.inf
    for a in range(1, n + 1):
        b, rem = divmod(n, a)
        if rem or a > rows or b > cols:
            continue
        score = abs(np.log((a / b) / (rows / cols)))
        if score < best_score:
            best, best_score = (a, b), score
    if best is None:
        raise ConfigError(f"cannot lay {n} blocks over a {rows}x{cols} grid")
    return best


def uniform_clustering(grid: GridSpec, part_numbers: Sequence[int]) -> GranularityHierarchy:
    """Rectangular spatial blocks at every level, ignoring embeddings."""
    _check_part_numbers(grid, part_numbers)
    rows, cols = grid.rows, grid.cols
    partitions: list[tuple[int, ...]] = []
    for k in part_numbers:
        br, bc = _block_shape(k, rows, cols)
        membership = []
        for r in range(rows):
            for c in range(cols):
                membership.append((r * br // rows) * bc + (c * bc // cols))
        partitions.append(tuple(membership))
        rows, cols = br, bc
    return GranularityHierarchy(
        level_sizes=(grid.n_regions, *part_numbers), partitions=tuple(partitions), method="uniform"
    )


def aggregate_region_features(
    st_fine: np.ndarray,
    membership: Sequence[int],
    policy: Sequence[Policy],
    n_coarse: int | None = None,
) -> np.ndarray:
    """Column-wise max/mean/sum of fine rows per cluster; leading axes are kept."""
    st_fine = np.asarray(st_fine)
    labels = np.asarray(membership, dtype=np.int64)
    if st_fine.shape[-2] != labels.size:
        raise DataError(f"features have {st_fine.shape[-2]} rows, partition has {labels.size}")
    if st_fine.shape[-1] != len(policy):
        raise DataError(f"policy has {len(policy)} columns, features have {st_fine.shape[-1]}")
    n_coarse = int(labels.max()) + 1 if n_coarse is None else n_coarse
    counts = np.bincount(labels, minlength=n_coarse)
    if np.any(counts == 0):
        raise DataError(f"empty cluster {int(np.flatnonzero(counts == 0)[0])}")

    policy_arr = np.asarray(policy)
    m = build_transform_matrix(labels, n_coarse).astype(st_fine.dtype)
    summed = np.swapaxes(np.swapaxes(st_fine, -1, -2) @ m, -1, -2)
    out = summed.copy()
    mean_cols = policy_arr == "mean"
    out[..., mean_cols] = summed[..., mean_cols] / counts[:, None].astype(st_fine.dtype)
    max_cols = np.flatnonzero(policy_arr == "max")
    if max_cols.size:
        for c in range(n_coarse):
            rows = st_fine[..., labels == c, :][..., max_cols]
            out[..., c, max_cols] = rows.max(axis=-2)
    return out


def _prune_top_k(weights: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    n = weights.shape[0]
    pruned = np.zeros_like(mask)
    for i in range(n):
        candidates = np.flatnonzero(mask[i])
        if candidates.size == 0:
            continue
        order = np.lexsort((candidates, -weights[i, candidates]))
        pruned[i, candidates[order[:k]]] = True
    return pruned


def lift_adjacency(
    adj: ViewAdjacency, membership: Sequence[int], k: int | None, n_coarse: int | None = None
) -> ViewAdjacency:
    """
    Clusters become nodes; a coarse edge exists when any fine edge crosses the
    two clusters and carries the largest such weight. k=None skips pruning.
    """
    labels = np.asarray(membership, dtype=np.int64)
    if labels.size != adj.n_nodes:
        raise DataError(f"partition covers {labels.size} nodes, graph has {adj.n_nodes}")
    n_coarse = int(labels.max()) + 1 if n_coarse is None else n_coarse
    rows, cols = np.nonzero(adj.mask)
    a, b = labels[rows], labels[cols]
    cross = a != b
    weights = np.zeros((n_coarse, n_coarse), dtype=np.float64)
    mask = np.zeros((n_coarse, n_coarse), dtype=bool)
    np.maximum.at(weights, (a[cross], b[cross]), adj.weights[rows[cross], cols[cross]])
    mask[a[cross], b[cross]] = True
    if k is not None:
        mask = _prune_top_k(weights, mask, k)
        weights = np.where(mask, weights, 0.0)
    return ViewAdjacency(view=adj.view, weights=weights, mask=mask)


def lift_graph(
    g_fine: Sequence[ViewAdjacency],
    membership: Sequence[int],
    k: int | None,
    n_coarse: int | None = None,
) -> list[ViewAdjacency]:
    """Lift every view graph of one level; n_coarse defaults to the largest label + 1."""
    n_coarse = int(np.max(membership)) + 1 if n_coarse is None else n_coarse
    return [lift_adjacency(adj, membership, k, n_coarse) for adj in g_fine]


def build_level_graphs(
    base: Sequence[ViewAdjacency], hierarchy: GranularityHierarchy, k: int
) -> list[list[ViewAdjacency]]:
    """View graphs for every level, lifting level g into level g+1."""
    levels = [list(base)]
    for g, part in enumerate(hierarchy.partitions, start=1):
        levels.append(lift_graph(levels[-1], part, k, hierarchy.level_sizes[g]))
    return levels
