from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import networkx as nx
import numpy as np
from networkx.algorithms.community import kernighan_lin_bisection

from hierrisk.window import DataError

logger = logging.getLogger(__name__)

# Bisections with at most this many candidate splits are solved exactly.
EXACT_LIMIT = 5000
GROWTH_STARTS = 8


@dataclass(frozen=True)
class PartitionResult:
    membership: tuple[int, ...]
    k: int
    cut_weight: float

    def __post_init__(self) -> None:
        if any(not 0 <= m < self.k for m in self.membership):
            raise DataError(f"membership outside [0, {self.k})")

    @property
    def n_nodes(self) -> int:
        return len(self.membership)

    def sizes(self) -> tuple[int, ...]:
        counts = np.bincount(np.asarray(self.membership, dtype=np.int64), minlength=self.k)
        return tuple(int(c) for c in counts)

    def members(self, part: int) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.membership) if m == part)


def weight_matrix(graph: nx.Graph) -> np.ndarray:
    n = graph.number_of_nodes()
    if set(graph.nodes) != set(range(n)):
        raise DataError("graph nodes must be labelled 0..N-1")
    weights = nx.to_numpy_array(graph, nodelist=range(n), weight="weight", dtype=np.float64)
    if np.any(weights < 0):
        raise DataError("edge weights must be >= 0")
    return weights


def cut_weight(weights: np.ndarray, membership: tuple[int, ...] | np.ndarray) -> float:
    """Total weight of edges whose endpoints sit in different parts."""
    labels = np.asarray(membership)
    crossing = labels[:, None] != labels[None, :]
    return float(np.triu(weights * crossing, k=1).sum())


def balanced_partition(
    graph: nx.Graph,
    k: int,
    tolerance: int = 1,
    *,
    seed: int = 0,
    exact_limit: int = EXACT_LIMIT,
) -> PartitionResult:
    """
    Split the graph into k parts of ceil(N/k) or floor(N/k) nodes with a small cut.

    Recursive bisection: each split is solved exactly when the number of
    candidate splits is at most `exact_limit`, otherwise by greedy graph
    growing from several start nodes followed by Kernighan-Lin refinement.
    """
    weights = weight_matrix(graph)
    n = weights.shape[0]
    if k < 1 or k > n:
        raise DataError(f"cannot split {n} nodes into {k} balanced parts")
    if tolerance < 0:
        raise DataError("balance tolerance must be >= 0")

    sizes = [n // k + (1 if i < n % k else 0) for i in range(k)]
    labels = np.zeros(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    _split(weights, list(range(n)), sizes, 0, labels, rng, exact_limit, seed)

    # Canonical part ids: ordered by smallest member.
    order = {}
    for label in labels:
        order.setdefault(int(label), len(order))
    membership = tuple(order[int(label)] for label in labels)

    result = PartitionResult(membership=membership, k=k, cut_weight=cut_weight(weights, membership))
    ideal = math.ceil(n / k)
    if any(abs(s - ideal) > tolerance for s in result.sizes()):
        raise DataError(f"partition sizes {result.sizes()} outside {ideal} +/- {tolerance}")
    logger.debug("partition nodes=%d parts=%d cut=%.6f", n, k, result.cut_weight)
    return result


def _split(
    weights: np.ndarray,
    nodes: list[int],
    sizes: list[int],
    first_label: int,
    labels: np.ndarray,
    rng: np.random.Generator,
    exact_limit: int,
    seed: int,
) -> None:
    if len(sizes) == 1:
        labels[nodes] = first_label
        return
    half = len(sizes) // 2
    left_size = sum(sizes[:half])
    left, right = bisect(weights, nodes, left_size, rng=rng, exact_limit=exact_limit, seed=seed)
    _split(weights, left, sizes[:half], first_label, labels, rng, exact_limit, seed)
    _split(weights, right, sizes[half:], first_label + half, labels, rng, exact_limit, seed)


def bisect(
    weights: np.ndarray,
    nodes: list[int],
    left_size: int,
    *,
    rng: np.random.Generator | None = None,
    exact_limit: int = EXACT_LIMIT,
    seed: int = 0,
) -> tuple[list[int], list[int]]:
    """Best found (left, right) split of `nodes` with len(left) == left_size."""
    nodes = sorted(nodes)
    if left_size <= 0 or left_size >= len(nodes):
        return (nodes, []) if left_size >= len(nodes) else ([], nodes)
    sub = weights[np.ix_(nodes, nodes)]
    if math.comb(len(nodes), left_size) <= exact_limit:
        best = _exact_bisection(sub, left_size)
    else:
        rng = rng if rng is not None else np.random.default_rng(seed)
        best = _heuristic_bisection(sub, left_size, rng, seed)
    left = [nodes[i] for i in sorted(best)]
    right = [nodes[i] for i in range(len(nodes)) if i not in best]
    return left, right


def _side_cut(sub: np.ndarray, left: set[int] | tuple[int, ...]) -> float:
    mask = np.zeros(sub.shape[0], dtype=bool)
    mask[list(left)] = True
    return float(sub[np.ix_(mask, ~mask)].sum())


def _exact_bisection(sub: np.ndarray, left_size: int) -> set[int]:
    best: tuple[int, ...] = ()
    best_cut = math.inf
    for combo in itertools.combinations(range(sub.shape[0]), left_size):
        cut = _side_cut(sub, combo)
        if cut < best_cut:
            best, best_cut = combo, cut
    return set(best)


def _grow(sub: np.ndarray, start: int, left_size: int) -> set[int]:
    # Greedy graph growing: repeatedly absorb the node with the largest gain.
    n = sub.shape[0]
    inside = np.zeros(n, dtype=bool)
    inside[start] = True
    to_inside = sub[start].copy()
    total = sub.sum(axis=1)
    while inside.sum() < left_size:
        gain = 2 * to_inside - total
        gain[inside] = -np.inf
        v = int(np.argmax(gain))
        inside[v] = True
        to_inside += sub[v]
    return set(np.flatnonzero(inside).tolist())


def _heuristic_bisection(
    sub: np.ndarray, left_size: int, rng: np.random.Generator, seed: int
) -> set[int]:
    n = sub.shape[0]
    graph = nx.from_numpy_array(sub)
    starts = rng.permutation(n)[: min(GROWTH_STARTS, n)]
    best: set[int] = set()
    best_cut = math.inf
    for start in sorted(int(s) for s in starts):
        grown = _grow(sub, start, left_size)
        rest = set(range(n)) - grown
        left, right = kernighan_lin_bisection(
            graph, partition=(grown, rest), weight="weight", seed=seed
        )
        # KL swaps pairs, so sizes are kept; orient so the left side has left_size nodes.
        candidate = set(left) if len(left) == left_size else set(right)
        cut = _side_cut(sub, tuple(candidate))
        if cut < best_cut:
            best, best_cut = candidate, cut
    return best
