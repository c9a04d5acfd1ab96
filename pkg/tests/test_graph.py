from functools import lru_cache

import numpy as np
import pytest

from dstgraph.decompose import DecompositionConfig
from dstgraph.graph import (
    ComponentGraph,
    GraphConfig,
    build_component_graphs,
    downsample,
    dtw_distance,
    knn_graph,
    pairwise_distances,
)


def dtw_oracle(a, b):
    """Memoized recursion straight from the DTW definition."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def cost(i, j):
        local = abs(a[i] - b[j])
        if i == 0 and j == 0:
            return local
        options = []
        if i > 0:
            options.append(cost(i - 1, j))
        if j > 0:
            options.append(cost(i, j - 1))
        if i > 0 and j > 0:
            options.append(cost(i - 1, j - 1))
        return local + min(options)

    return cost(len(a) - 1, len(b) - 1)


def test_downsample_examples():
    np.testing.assert_array_equal(downsample(np.array([1, 2, 3, 4, 5, 6.0]), 2), [1.5, 3.5, 5.5])
    np.testing.assert_array_equal(downsample(np.array([1, 2, 3.0]), 2), [1.5, 3])
    x = np.random.default_rng(0).normal(size=17)
    np.testing.assert_array_equal(downsample(x, 1), x)
    assert downsample(x, 5).shape == (4,)
    with pytest.raises(ValueError):
        downsample(x, 0)


def test_dtw_examples():
    x = np.array([0.3, 1.2, -4.0, 2.0])
    assert dtw_distance(x, x) == 0.0
    assert dtw_distance([1, 2, 3], [1, 2, 2, 3]) == 0.0
    assert dtw_distance([0, 0], [1, 1]) == 2.0
    with pytest.raises(ValueError):
        dtw_distance([], [1.0])


def test_dtw_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = rng.integers(0, 4, size=rng.integers(1, 9)).astype(float)
        b = rng.integers(0, 4, size=rng.integers(1, 9)).astype(float)
        assert dtw_distance(a, b) == dtw_oracle(a, b)
        assert dtw_distance(a, b) == dtw_distance(b, a)


def test_dtw_band():
    a = np.array([0, 5, 0, 0.0])
    b = np.array([0, 0, 5, 0.0])
    assert dtw_distance(a, b, band=0) == 10.0
    assert dtw_distance(a, b, band=1) == 0.0
    assert dtw_distance(a, b) == 0.0
    with pytest.raises(ValueError):
        dtw_distance([1.0, 2.0, 3.0], [1.0], band=1)


def test_pairwise_identical_channels():
    x = np.tile(np.array([1.0, 3.0, 2.0]), (4, 1))
    np.testing.assert_array_equal(pairwise_distances(x).values, 0.0)


def test_pairwise_matches_oracle_and_symmetric():
    x = np.array([[0, 1, 2], [2, 1, 0], [0, 0, 3.0]])
    dist = pairwise_distances(x).values
    for i in range(3):
        for j in range(3):
            assert dist[i, j] == dtw_oracle(x[i], x[j])
    np.testing.assert_array_equal(dist, dist.T)
    normed = pairwise_distances(x, normalize=True)
    assert normed.normalized
    off = ~np.eye(3, dtype=bool)
    assert normed.values[off].min() == 0.0 and normed.values[off].max() == 1.0
    np.testing.assert_array_equal(np.diag(normed.values), 0.0)


def test_pairwise_permutation_equivariant():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 12))
    perm = rng.permutation(5)
    base = pairwise_distances(x).values
    np.testing.assert_allclose(pairwise_distances(x[perm]).values, base[np.ix_(perm, perm)])


def test_knn_argmin_example():
    graph = knn_graph(np.array([[0, 1, 5], [1, 0, 2], [5, 2, 0.0]]), 1)
    assert graph.edges() == [(0, 1), (1, 0), (2, 1)]


def test_knn_complete_graph():
    dist = np.random.default_rng(0).random((4, 4))
    dist = dist + dist.T
    adj = knn_graph(dist, 3).adjacency
    np.testing.assert_array_equal(adj, 1 - np.eye(4, dtype=int))


def test_knn_tie_goes_to_lower_index():
    graph = knn_graph(np.array([[0, 2, 2], [2, 0, 2], [2, 2, 0.0]]), 1)
    assert graph.edges() == [(0, 1), (1, 0), (2, 0)]


def test_knn_rows_and_range():
    dist = np.random.default_rng(1).random((6, 6))
    for k in range(1, 6):
        adj = knn_graph(dist, k).adjacency
        assert (adj.sum(axis=1) == k).all()
        assert (np.diag(adj) == 0).all()
    with pytest.raises(ValueError):
        knn_graph(dist, 0)
    with pytest.raises(ValueError):
        knn_graph(dist, 6)


def test_knn_invariant_under_monotone_transform():
    rng = np.random.default_rng(2)
    dist = rng.random((7, 7))
    for transform in (np.exp, np.sqrt, lambda d: 3 * d + 1, lambda d: d**3):
        np.testing.assert_array_equal(knn_graph(transform(dist), 2).adjacency, knn_graph(dist, 2).adjacency)


def test_neighborhoods_put_self_first():
    graph = knn_graph(np.array([[0, 1, 5], [1, 0, 2], [5, 2, 0.0]]), 1)
    index, mask = graph.neighborhoods()
    np.testing.assert_array_equal(index, [[0, 1], [1, 0], [2, 1]])
    assert mask.all()
    single, single_mask = ComponentGraph.self_loops_only(1, "trend").neighborhoods()
    assert single.tolist() == [[0]] and single_mask.tolist() == [[True]]


def _shift_toy():
    t = np.arange(240.0)
    c0 = np.sin(2 * np.pi * t / 24) + 0.002 * t
    c1 = np.cos(2 * np.pi * t / 7) * 2 + np.sqrt(t)
    c2 = np.roll(c0, 1)
    c2[0] = c0[0]
    return np.stack([c0, c1, c2], axis=1)


def test_build_graphs_shifted_channel_pair():
    values = _shift_toy()
    graphs, distances = build_component_graphs(values, DecompositionConfig(period=24), GraphConfig(k=1))
    assert set(graphs) == {"trend", "seasonal", "residual"}
    edges = graphs["trend"].edges()
    assert (0, 2) in edges or (2, 0) in edges
    # oracle: the pair with the smallest downsampled-trend DTW distance is (0, 2)
    trend = distances["trend"].values
    assert trend[0, 2] == min(trend[0, 1], trend[0, 2], trend[1, 2])


def test_build_graphs_identical_channels_use_tie_rule():
    values = np.tile(np.sin(np.arange(96.0) / 3)[:, None], (1, 4))
    graphs, _ = build_component_graphs(values, DecompositionConfig(period=24), GraphConfig(k=2))
    for graph in graphs.values():
        assert graph.edges() == [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (3, 0), (3, 1)]


def test_build_graphs_two_channels():
    rng = np.random.default_rng(4)
    graphs, _ = build_component_graphs(rng.normal(size=(72, 2)), DecompositionConfig(period=12), GraphConfig(k=1))
    for graph in graphs.values():
        assert graph.edges() == [(0, 1), (1, 0)]


def test_build_graphs_include_raw_and_k_cap():
    rng = np.random.default_rng(5)
    graphs, _ = build_component_graphs(
        rng.normal(size=(72, 3)), DecompositionConfig(period=12), GraphConfig(k=5), include_raw=True
    )
    assert set(graphs) == {"trend", "seasonal", "residual", "raw"}
    for graph in graphs.values():
        assert (graph.adjacency.sum(axis=1) == 2).all()
