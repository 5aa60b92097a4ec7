import itertools

import networkx as nx
import numpy as np
import pytest

from hierrisk.partition import (
    EXACT_LIMIT,
    PartitionResult,
    balanced_partition,
    bisect,
    cut_weight,
)
from hierrisk.window import DataError


def _random_graph(n: int, seed: int) -> nx.Graph:
    rng = np.random.default_rng(seed)
    graph = nx.gnp_random_graph(n, 0.5, seed=seed)
    for u, v in graph.edges:
        graph[u][v]["weight"] = float(rng.uniform(0.1, 1.0))
    return graph


def _brute_force_bisection(graph: nx.Graph) -> float:
    n = graph.number_of_nodes()
    weights = nx.to_numpy_array(graph, nodelist=range(n))
    best = np.inf
    for left in itertools.combinations(range(n), n // 2):
        labels = np.ones(n, dtype=np.int64)
        labels[list(left)] = 0
        best = min(best, cut_weight(weights, labels))
    return best


def _two_cliques(size: int, bridge: float) -> nx.Graph:
    graph = nx.Graph()
    for offset in (0, size):
        for u, v in itertools.combinations(range(offset, offset + size), 2):
            graph.add_edge(u, v, weight=1.0)
    if bridge:
        graph.add_edge(0, size, weight=bridge)
        graph.add_edge(size - 1, 2 * size - 1, weight=bridge)
    return graph


def test_single_part() -> None:
    result = balanced_partition(_random_graph(6, 0), 1)
    assert result.membership == (0,) * 6
    assert result.cut_weight == 0.0


def test_disconnected_components_cut_free() -> None:
    result = balanced_partition(_two_cliques(4, 0.0), 2)
    assert result.cut_weight == 0.0
    assert set(result.members(0)) == {0, 1, 2, 3}


@pytest.mark.parametrize("exact_limit", [EXACT_LIMIT, 0])
def test_random_graphs_against_brute_force(exact_limit: int) -> None:
    rng = np.random.default_rng(7)
    for trial in range(50):
        n = int(rng.integers(4, 13))
        graph = _random_graph(n, trial)
        result = balanced_partition(graph, 2, exact_limit=exact_limit)
        optimum = _brute_force_bisection(graph)
        assert result.cut_weight <= 1.5 * optimum + 1e-12
        assert sorted(result.sizes()) == [n // 2, n - n // 2]


def test_heuristic_finds_planted_split() -> None:
    graph = _two_cliques(8, 0.1)
    result = balanced_partition(graph, 2, exact_limit=0, seed=3)
    assert result.cut_weight == pytest.approx(0.2)
    assert set(result.members(0)) == set(range(8))


@pytest.mark.parametrize("n, k", [(12, 4), (11, 3), (9, 2)])
def test_parts_within_tolerance(n: int, k: int) -> None:
    result = balanced_partition(_random_graph(n, n), k, exact_limit=0)
    ideal = -(-n // k)
    assert len(result.sizes()) == k
    assert all(abs(s - ideal) <= 1 for s in result.sizes())
    assert sum(result.sizes()) == n


def test_part_ids_ordered_by_first_member() -> None:
    result = balanced_partition(_random_graph(8, 1), 4)
    seen = []
    for label in result.membership:
        if label not in seen:
            seen.append(label)
    assert seen == [0, 1, 2, 3]


def test_cut_weight_reported_matches_membership() -> None:
    graph = _random_graph(10, 4)
    result = balanced_partition(graph, 3)
    weights = nx.to_numpy_array(graph, nodelist=range(10))
    assert result.cut_weight == pytest.approx(cut_weight(weights, result.membership))


def test_too_many_parts() -> None:
    with pytest.raises(DataError) as exc_info:
        balanced_partition(_random_graph(3, 0), 4)
    assert "cannot split 3 nodes into 4" in str(exc_info.value)


def test_negative_weights_rejected() -> None:
    graph = nx.Graph()
    graph.add_edge(0, 1, weight=-1.0)
    with pytest.raises(DataError):
        balanced_partition(graph, 2)


def test_node_labels_must_be_dense() -> None:
    graph = nx.Graph()
    graph.add_edge(0, 5, weight=1.0)
    with pytest.raises(DataError):
        balanced_partition(graph, 1)


def test_bisect_trivial_sizes() -> None:
    weights = np.ones((3, 3))
    assert bisect(weights, [2, 0, 1], 3) == ([0, 1, 2], [])
    assert bisect(weights, [2, 0, 1], 0) == ([], [0, 1, 2])


def test_membership_range_checked() -> None:
    with pytest.raises(DataError):
        PartitionResult(membership=(0, 2), k=2, cut_weight=0.0)
