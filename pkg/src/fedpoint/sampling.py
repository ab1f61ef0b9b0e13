"""Point-set geometry: metrics, k-NN search, farthest sampling, grouping.

Everything here is a pure deterministic function of its inputs.  Distances
are computed brute-force (dense n x n matrices, n <= 1024 by design);
ties are always broken toward the lowest index so results are exactly
reproducible and checkable against naive oracles.

Two metrics exist:

- ``euclidean-position`` on the (px, py, 1) coordinates, and
- ``cosine-feature`` using the feature-space distance
  ``1 - (a . b) / max(|a|, |b|, 1e-8)`` — note the denominator is the max
  of the two norms, not their product, so the value is unbounded below for
  vectors longer than 1. A ``denominator="product"`` switch selects the
  conventional normalization instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-8

EUCLIDEAN = "euclidean-position"
COSINE = "cosine-feature"


@dataclass
class PointSet:
    """One slide: n points with (px, py, 1) positions and d-dim features."""

    positions: np.ndarray  # (n, 3) float64, third column fixed at 1
    features: np.ndarray  # (n, d) float64
    label: int | None = None
    uid: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {self.positions.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.positions.shape[0]:
            raise ValueError("features must be (n, d) aligned with positions")
        if self.positions.shape[0] < 1:
            raise ValueError("a point set needs at least one point")
        if not np.all(self.positions[:, 2] == 1.0):
            raise ValueError("third position coordinate must be fixed at 1")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class NeighborIndex:
    """k neighbors for each of m center points (indices into the source set)."""

    centers: np.ndarray  # (m,)
    neighbors: np.ndarray  # (m, k)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.int64)
        self.neighbors = np.asarray(self.neighbors, dtype=np.int64)


def cosine_distance(a: np.ndarray, b: np.ndarray, denominator: str = "max") -> float:
    """Feature-space distance 1 - (a.b)/max(|a|, |b|, 1e-8).

    With ``denominator="product"`` the conventional |a||b| normalization is
    used (each norm floored at 1e-8).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"cosine_distance needs equal-length vectors, got {a.shape}, {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if denominator == "max":
        denom = max(na, nb, NORM_FLOOR)
    elif denominator == "product":
        denom = max(na, NORM_FLOOR) * max(nb, NORM_FLOOR)
    else:
        raise ValueError(f"unknown denominator rule {denominator!r}")
    return float(1.0 - (a @ b) / denom)


def cosine_distance_matrix(
    feats: np.ndarray, queries: np.ndarray | None = None, denominator: str = "max"
) -> np.ndarray:
    """(q, n) matrix of cosine distances from query rows to all rows."""
    feats = np.asarray(feats, dtype=np.float64)
    q = feats if queries is None else np.asarray(queries, dtype=np.float64)
    dots = q @ feats.T
    nq = np.linalg.norm(q, axis=1)
    nf = np.linalg.norm(feats, axis=1)
    if denominator == "max":
        denom = np.maximum(np.maximum(nq[:, None], nf[None, :]), NORM_FLOOR)
    elif denominator == "product":
        denom = np.maximum(nq, NORM_FLOOR)[:, None] * np.maximum(nf, NORM_FLOOR)[None, :]
    else:
        raise ValueError(f"unknown denominator rule {denominator!r}")
    return 1.0 - dots / denom


def squared_euclidean_matrix(points: np.ndarray, queries: np.ndarray | None = None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    q = points if queries is None else np.asarray(queries, dtype=np.float64)
    # |a-b|^2 expanded; clamp tiny negatives from cancellation
    sq = (q**2).sum(axis=1)[:, None] + (points**2).sum(axis=1)[None, :] - 2.0 * (q @ points.T)
    return np.maximum(sq, 0.0)


def _smallest_k(dist_rows: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row; ties go to the lower index."""
    order = np.argsort(dist_rows, axis=1, kind="stable")
    return order[:, :k]


def _metric_matrix(points: PointSet, query_indices: np.ndarray, metric: str,
                   denominator: str = "max") -> np.ndarray:
    if metric == EUCLIDEAN:
        return squared_euclidean_matrix(points.positions, points.positions[query_indices])
    if metric == COSINE:
        return cosine_distance_matrix(points.features, points.features[query_indices],
                                      denominator=denominator)
    raise ValueError(f"unknown metric {metric!r}")


def knn(points: PointSet, query_indices, k: int, metric: str = EUCLIDEAN,
        denominator: str = "max") -> NeighborIndex:
    """k nearest neighbors (self included) of each query point.

    Queries index into ``points``; neighbors are searched over the whole
    set.  Deterministic: equal distances are resolved toward lower indices.
    """
    query_indices = np.asarray(query_indices, dtype=np.int64)
    if k < 1 or k > points.n:
        raise ValueError(f"k must be in [1, {points.n}], got {k}")
    dist = _metric_matrix(points, query_indices, metric, denominator)
    return NeighborIndex(centers=query_indices, neighbors=_smallest_k(dist, k))


def group(points: PointSet, centers, k: int, metric: str = EUCLIDEAN,
          denominator: str = "max") -> NeighborIndex:
    """k-NN grouping around sampled centers, searched over the full set."""
    return knn(points, centers, k, metric=metric, denominator=denominator)


def _greedy_max_min(dist: np.ndarray, start: int, m: int) -> np.ndarray:
    """Greedy max-min selection over a precomputed distance matrix."""
    n = dist.shape[0]
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_dist = dist[start].copy()
    min_dist[start] = -np.inf
    for t in range(1, m):
        pick = int(np.argmax(min_dist))  # first max == lowest index on ties
        selected[t] = pick
        np.minimum(min_dist, dist[pick], out=min_dist)
        min_dist[pick] = -np.inf
    return selected


def farthest_cosine_sampling(features: np.ndarray, m: int, denominator: str = "max") -> np.ndarray:
    """Greedy max-min sampling of m rows in feature space, in selection order.

    The first point is the one farthest (cosine distance) from the feature
    centroid; each later pick maximizes its minimum distance to the points
    already selected.  Ties always resolve to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"sample size must be in [1, {n}], got {m}")
    centroid = features.mean(axis=0)
    start_dist = cosine_distance_matrix(features, centroid[None, :], denominator=denominator)[0]
    start = int(np.argmax(start_dist))
    dist = cosine_distance_matrix(features, denominator=denominator)
    return _greedy_max_min(dist, start, m)


def farthest_point_sampling(positions: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min sampling of m rows in position space (Euclidean)."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"sample size must be in [1, {n}], got {m}")
    centroid = positions.mean(axis=0)
    start_dist = squared_euclidean_matrix(positions, centroid[None, :])[0]
    start = int(np.argmax(start_dist))
    dist = squared_euclidean_matrix(positions)
    return _greedy_max_min(dist, start, m)
