"""Offline graph inference: downsample each component, DTW distances, K nearest neighbours."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .decompose import DecompositionConfig, decompose


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    normalized: bool = False

    def min_max(self) -> DistanceMatrix:
        """Scale off-diagonal entries to [0, 1]; the diagonal stays 0."""
        d = self.values
        off = ~np.eye(d.shape[0], dtype=bool)
        if not off.any():
            return DistanceMatrix(d.copy(), True)
        lo, hi = d[off].min(), d[off].max()
        scaled = np.zeros_like(d)
        if hi > lo:
            scaled[off] = (d[off] - lo) / (hi - lo)
        return DistanceMatrix(scaled, True)


@dataclass(frozen=True)
class ComponentGraph:
    """Directed adjacency: ``adjacency[i, j] == 1`` means node i aggregates from node j."""

    adjacency: np.ndarray
    component_tag: str

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        src, dst = np.nonzero(self.adjacency)
        return list(zip(src.tolist(), dst.tolist()))

    def neighborhoods(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded neighbour index table with each node itself first, plus validity mask."""
        n = self.n_nodes
        lists = [[i] + [int(j) for j in np.flatnonzero(self.adjacency[i]) if j != i] for i in range(n)]
        width = max(len(x) for x in lists)
        index = np.zeros((n, width), dtype=np.int64)
        mask = np.zeros((n, width), dtype=bool)
        for i, nbrs in enumerate(lists):
            index[i, :len(nbrs)] = nbrs
            index[i, len(nbrs):] = i
            mask[i, :len(nbrs)] = True
        return index, mask

    @classmethod
    def self_loops_only(cls, n: int, component_tag: str) -> ComponentGraph:
        return cls(np.zeros((n, n), dtype=np.int64), component_tag)


def downsample(series: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping windows of ``factor`` points along the last axis."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    x = np.asarray(series, dtype=np.float64)
    if factor == 1:
        return x.copy()
    n = x.shape[-1]
    starts = np.arange(0, n, factor)
    sums = np.add.reduceat(x, starts, axis=-1)
    counts = np.diff(np.append(starts, n))
    return sums / counts


@numba.njit(cache=True)
def _dtw(a, b, band):
    n, m = a.shape[0], b.shape[0]
    inf = np.inf
    prev = np.full(m + 1, inf)
    cur = np.full(m + 1, inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[:] = inf
        lo = max(1, i - band)
        hi = min(m, i + band)
        for j in range(lo, hi + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(a[i - 1] - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


def dtw_distance(a, b, band: int | None = None) -> float:
    """Classic DTW with absolute local cost and an optional Sakoe-Chiba band half-width."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size == 0 or b.size == 0:
        raise ValueError("dtw_distance needs two non-empty 1-D series")
    if band is None:
        band = max(a.size, b.size)
    if band < abs(a.size - b.size):
        raise ValueError(f"band {band} cannot align series of lengths {a.size} and {b.size}")
    return float(_dtw(a, b, band))


def pairwise_distances(series: np.ndarray, band: int | None = None, normalize: bool = False) -> DistanceMatrix:
    """DTW distance between every pair of rows of a (D, T) array."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError("pairwise_distances expects equal-length channels stacked as (D, T)")
    d = series.shape[0]
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(i + 1, d):
            out[i, j] = out[j, i] = dtw_distance(series[i], series[j], band)
    dist = DistanceMatrix(out)
    return dist.min_max() if normalize else dist


def knn_graph(dist: DistanceMatrix | np.ndarray, k: int, component_tag: str = "") -> ComponentGraph:
    """Edge i -> j to each of the K closest j != i; ties go to the lower index."""
    values = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    n = values.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"K must lie in [1, {n - 1}] for {n} nodes, got {k}")
    masked = values.astype(np.float64, copy=True)
    np.fill_diagonal(masked, np.inf)
    nearest = np.argsort(masked, axis=1, kind="stable")[:, :k]
    adjacency = np.zeros((n, n), dtype=np.int64)
    np.put_along_axis(adjacency, nearest, 1, axis=1)
    return ComponentGraph(adjacency, component_tag)


@dataclass(frozen=True)
class GraphConfig:
    k: int = 3
    trend_factor: int | None = None  # None -> period
    seasonal_factor: int = 1
    residual_factor: int | None = None  # None -> period
    band: int | None = None

    def factor(self, component: str, period: int) -> int:
        value = {
            "trend": self.trend_factor,
            "seasonal": self.seasonal_factor,
            "residual": self.residual_factor,
            "raw": self.trend_factor,
        }[component]
        return period if value is None else value


def build_component_graphs(
    values: np.ndarray,
    decomposition: DecompositionConfig,
    config: GraphConfig = GraphConfig(),
    include_raw: bool = False,
    periods: tuple[int, ...] | None = None,
) -> tuple[dict[str, ComponentGraph], dict[str, DistanceMatrix]]:
    """Infer one K-NN graph per decomposition component from a (T, D) training table.

    ``include_raw`` adds a graph on the undecomposed series, used when the
    model runs with decomposition disabled.
    """
    values = np.asarray(values, dtype=np.float64)
    series = values.T  # (D, T)
    parts = decompose(series, decomposition, periods=periods).as_dict()
    if include_raw:
        parts["raw"] = series
    # K is capped at D - 1 so small tables still get a complete graph
    k = min(config.k, series.shape[0] - 1)
    graphs, distances = {}, {}
    for name, comp in parts.items():
        reduced = downsample(comp, config.factor(name, decomposition.period))
        dist = pairwise_distances(reduced, band=config.band, normalize=True)
        distances[name] = dist
        graphs[name] = knn_graph(dist, k, name) if k >= 1 else ComponentGraph.self_loops_only(1, name)
    return graphs, distances

