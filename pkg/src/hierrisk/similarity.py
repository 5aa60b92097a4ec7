from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import rel_entr

from hierrisk import storage
from hierrisk.config import VIEW_NAMES
from hierrisk.features import risk_levels
from hierrisk.window import DataError

logger = logging.getLogger(__name__)

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class ViewAdjacency:
    """Top-K similarity graph of one view; `mask` marks retained edges, `weights` their values."""

    view: str
    weights: np.ndarray  # (N, N), zero off the mask
    mask: np.ndarray  # (N, N) bool, row i -> its retained neighbours

    def __post_init__(self) -> None:
        if self.view not in VIEW_NAMES:
            raise DataError(f"unknown view '{self.view}'")
        if self.weights.shape != self.mask.shape or self.weights.ndim != 2:
            raise DataError("adjacency weights and mask must be matching square matrices")

    @property
    def n_nodes(self) -> int:
        return int(self.weights.shape[0])

    def row_degrees(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def to_coo(self) -> sparse.coo_matrix:
        rows, cols = np.nonzero(self.mask)
        return sparse.coo_matrix(
            (self.weights[rows, cols], (rows, cols)), shape=self.weights.shape
        )


def _as_distribution(x: np.ndarray, label: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"{label} must be a vector")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DataError(f"{label} has negative or non-finite entries")
    return x


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """
    Jensen-Shannon divergence with base-2 logarithms, in [0, 1].

    Inputs are rescaled to sum to 1. An all-zero vector carries no signal and
    is treated as maximally distant from everything.
    """
    p = _as_distribution(p, "P")
    q = _as_distribution(q, "Q")
    if p.shape != q.shape:
        raise DataError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    sp, sq = p.sum(), q.sum()
    if sp == 0 or sq == 0:
        return 1.0
    p = p / sp
    q = q / sq
    m = 0.5 * (p + q)
    value = 0.5 * (rel_entr(p, m).sum() + rel_entr(q, m).sum()) / _LN2
    return float(min(max(value, 0.0), 1.0))


def _normalised_rows(descriptors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 2:
        raise DataError("descriptors must be an (N, D) matrix")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise DataError("descriptors have negative or non-finite entries")
    totals = d.sum(axis=1)
    empty = totals == 0
    return d / np.where(empty, 1.0, totals)[:, None], empty


def pairwise_similarity(descriptors: np.ndarray, others: np.ndarray | None = None) -> np.ndarray:
    """
    Matrix of 1 - jsd between descriptor rows; zero rows score 0.

    With `others` the result is (N, M) against its rows, otherwise (N, N).
    """
    left, empty_left = _normalised_rows(descriptors)
    right, empty_right = (left, empty_left) if others is None else _normalised_rows(others)
    if left.shape[1] != right.shape[1]:
        raise DataError(f"length mismatch: {left.shape[1]} vs {right.shape[1]}")
    a = left[:, None, :]
    b = right[None, :, :]
    m = 0.5 * (a + b)
    div = 0.5 * (rel_entr(a, m).sum(axis=-1) + rel_entr(b, m).sum(axis=-1)) / _LN2
    sim = 1.0 - np.clip(div, 0.0, 1.0)
    sim[empty_left, :] = 0.0
    sim[:, empty_right] = 0.0
    return sim


def view_similarity(
    i: int | np.ndarray,
    j: int | np.ndarray,
    view: str,
    descriptors: Mapping[str, np.ndarray],
) -> float | np.ndarray:
    """Similarity of regions i and j under one view; index arrays give the (|i|, |j|) block."""
    if view not in descriptors:
        raise DataError(f"no descriptors for view '{view}'")
    table = np.asarray(descriptors[view], dtype=np.float64)
    if np.ndim(i) == 0 and np.ndim(j) == 0:
        return 1.0 - jsd(table[i], table[j])
    return pairwise_similarity(table[np.atleast_1d(i)], table[np.atleast_1d(j)])


def top_k_adjacency(sim: np.ndarray, k: int, view: str) -> ViewAdjacency:
    """
    Keep each row's k most similar other nodes; ties go to the smaller index.

    The result is not symmetrised.
    """
    n = sim.shape[0]
    if n < 2:
        raise DataError("top-K adjacency needs at least 2 nodes")
    if k < 1:
        raise DataError("K must be >= 1")
    keep = min(k, n - 1)
    weights = np.zeros((n, n), dtype=np.float64)
    mask = np.zeros((n, n), dtype=bool)
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, -sim[i, others]))
        chosen = others[order[:keep]]
        mask[i, chosen] = True
        weights[i, chosen] = sim[i, chosen]
    return ViewAdjacency(view=view, weights=weights, mask=mask)


def build_view_adjacency(descriptors: np.ndarray, k: int, view: str = "poi") -> ViewAdjacency:
    idx = np.arange(np.shape(descriptors)[0])
    sim = view_similarity(idx, idx, view, {view: descriptors})
    adjacency = top_k_adjacency(sim, k, view)
    logger.debug("view adjacency view=%s nodes=%d k=%d", view, adjacency.n_nodes, k)
    return adjacency


def compose_graph_signal(adj: ViewAdjacency, node_feats: np.ndarray) -> np.ndarray:
    """M_A · M_n for one view; node_feats may carry leading time axes (..., N, d_c)."""
    node_feats = np.asarray(node_feats)
    if node_feats.shape[-2] != adj.n_nodes:
        raise DataError(
            f"node features have {node_feats.shape[-2]} rows, adjacency has {adj.n_nodes}"
        )
    return np.matmul(adj.weights.astype(node_feats.dtype), node_feats)


def compose_graph_signals(views: Sequence[ViewAdjacency], node_feats: np.ndarray) -> np.ndarray:
    """Per-view signals concatenated on the feature axis: (..., N, V * d_c)."""
    return np.concatenate([compose_graph_signal(a, node_feats) for a in views], axis=-1)


def risk_descriptor(
    risk_history: np.ndarray, thresholds: tuple[float, ...] = (0.0, 2.0, 4.0)
) -> np.ndarray:
    """Per-region normalised histogram of risk levels over (T, N) history."""
    levels = risk_levels(risk_history, thresholds)
    n_levels = len(thresholds) + 1
    counts = np.stack([(levels == k).sum(axis=0) for k in range(n_levels)], axis=1)
    totals = counts.sum(axis=1, keepdims=True)
    return (counts / np.where(totals > 0, totals, 1)).astype(np.float64)


def view_descriptors(
    *,
    road: np.ndarray,
    poi: np.ndarray,
    risk_history: np.ndarray,
    thresholds: tuple[float, ...],
    views: Sequence[str] = VIEW_NAMES,
) -> dict[str, np.ndarray]:
    table = {
        "road": np.asarray(road, dtype=np.float64),
        "risk": risk_descriptor(risk_history, thresholds),
        "poi": np.asarray(poi, dtype=np.float64),
    }
    return {v: table[v] for v in views}


def save_adjacency(directory: str | Path, adj: ViewAdjacency, level: int = 1) -> Path:
    """Coordinate list (row, col, weight) per retained edge in float64, tagged with its view."""
    coo = adj.to_coo()
    triples = np.stack([coo.row, coo.col, coo.data], axis=1) if coo.nnz else np.zeros((0, 3))
    name = storage.tensor_name(f"adjacency.{adj.view}", level)
    path = storage.write_tensor(directory, name, triples, dtype="<f8")
    storage.atomic_write_json(
        Path(directory) / f"{name}.view.json",
        {"view": adj.view, "n_nodes": adj.n_nodes, "level": level},
    )
    return path


def load_adjacency(directory: str | Path, view: str, level: int = 1) -> ViewAdjacency:
    name = storage.tensor_name(f"adjacency.{view}", level)
    info = storage.read_json(Path(directory) / f"{name}.view.json")
    triples = storage.read_tensor(directory, name)
    n = int(info["n_nodes"])
    rows = triples[:, 0].astype(np.int64)
    cols = triples[:, 1].astype(np.int64)
    weights = np.zeros((n, n), dtype=np.float64)
    mask = np.zeros((n, n), dtype=bool)
    weights[rows, cols] = triples[:, 2]
    mask[rows, cols] = True
    return ViewAdjacency(view=str(info["view"]), weights=weights, mask=mask)
