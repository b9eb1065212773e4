"""Anchor-shape clustering with the overlap-based distance 1 - IoU.

Box shapes are position-free (width, height) pairs; for the distance the
two boxes are co-centred, so the metric is invariant to a global rescale
of all shapes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BoxShape",
    "ClusteringResult",
    "shape_distance",
    "kmeans_iou",
    "sse",
    "mean_silhouette",
    "select_k",
    "partition_anchors_by_scale",
]

MAX_ITERATIONS = 300


@dataclass(frozen=True)
class BoxShape:
    """Width/height of a box, centre-free."""

    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"shape sides must be positive, got {self}")

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class ClusteringResult:
    """Centroids, assignment and the three selection diagnostics."""

    k: int
    centroids: tuple[BoxShape, ...]
    assignment: tuple[int, ...]
    mean_iou: float
    sse: float
    mean_silhouette: float
    sse_history: tuple[float, ...]


def _as_array(shapes) -> np.ndarray:
    arr = np.array([(s.width, s.height) for s in shapes], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no shapes given")
    return arr


def _pair_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Co-centred IoU between every row of a (n,2) and every row of b (m,2)."""
    inter = np.minimum(a[:, None, 0], b[None, :, 0]) * np.minimum(a[:, None, 1], b[None, :, 1])
    area_a = (a[:, 0] * a[:, 1])[:, None]
    area_b = (b[:, 0] * b[:, 1])[None, :]
    return inter / (area_a + area_b - inter)


def shape_distance(a: BoxShape, b: BoxShape) -> float:
    """1 - IoU of two co-centred shapes; 0 iff the shapes are identical."""
    inter = min(a.width, b.width) * min(a.height, b.height)
    union = a.area + b.area - inter
    return 1.0 - inter / union


def _seed_centroids(arr: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding: spread the initial centroids by distance."""
    n = arr.shape[0]
    centroids = np.empty((k, 2), dtype=np.float64)
    centroids[0] = arr[rng.integers(n)]
    if k == 1:
        return centroids
    d2 = (1.0 - _pair_iou(arr, centroids[:1])[:, 0]) ** 2
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid: pick any new one
            fresh = np.flatnonzero(~(arr[:, None] == centroids[None, :j]).all(-1).any(-1))
            centroids[j] = arr[fresh[0]] if fresh.size else arr[rng.integers(n)]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            centroids[j] = arr[min(idx, n - 1)]
        d2 = np.minimum(d2, (1.0 - _pair_iou(arr, centroids[j:j + 1])[:, 0]) ** 2)
    return centroids


def _update_centroid(cluster: np.ndarray, how: str) -> np.ndarray:
    if how == "median":
        return np.median(cluster, axis=0)
    if how == "mean":
        return cluster.mean(axis=0)
    raise ValueError(f"unknown centroid update {how!r}")


def _partition_state(arr: np.ndarray, assignment: np.ndarray, k: int, how: str):
    """Centroids (per the update rule) and SSE of a partition."""
    centroids = np.empty((k, 2), dtype=np.float64)
    for j in range(k):
        members = arr[assignment == j]
        if members.shape[0] == 0:
            raise ValueError("partition has an empty cluster")
        centroids[j] = _update_centroid(members, how)
    d = 1.0 - _pair_iou(arr, centroids)
    value = float((d[np.arange(arr.shape[0]), assignment] ** 2).sum())
    return centroids, d, value


def _repair_empty(arr, d, assignment, k):
    """Give every empty cluster the farthest member of the worst cluster.

    Operates on scratch copies; only the repaired assignment is returned
    (centroids are re-derived from it by the caller).
    """
    if np.bincount(assignment, minlength=k).min() > 0:
        return assignment
    n = arr.shape[0]
    d = d.copy()
    assignment = assignment.copy()
    for j in range(k):
        if not (assignment == j).any():
            contrib = np.bincount(assignment, weights=d[np.arange(n), assignment] ** 2, minlength=k)
            worst = int(contrib.argmax())
            members = np.flatnonzero(assignment == worst)
            farthest = members[d[members, worst].argmax()]
            d[:, j] = 1.0 - _pair_iou(arr, arr[farthest:farthest + 1])[:, 0]
            assignment = d.argmin(axis=1)
            assignment[farthest] = j
    return assignment


def kmeans_iou(shapes, k: int, seed: int = 0, centroid_update: str = "median") -> ClusteringResult:
    """Lloyd iteration under the 1 - IoU distance.

    Centroids are the per-cluster element-wise median (or mean) of the
    member shapes.  Each iteration reassigns shapes to the nearest
    centroid and re-derives the centroids; the loop is a monotone descent
    on the partition objective and stops when assignments stabilize, when
    a reassignment would not improve it (the median is a heuristic
    minimizer under this metric, so oscillation is cut off at its best
    state), or at the iteration cap.  Empty clusters are repaired by
    splitting the cluster contributing the most SSE.  Deterministic for a
    fixed seed.
    """
    arr = _as_array(shapes)
    n = arr.shape[0]
    n_distinct = np.unique(arr, axis=0).shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct shapes")

    rng = np.random.default_rng(seed)
    seed_centroids = _seed_centroids(arr, k, rng)
    d0 = 1.0 - _pair_iou(arr, seed_centroids)
    assignment = _repair_empty(arr, d0, d0.argmin(axis=1), k)

    centroids, d, value = _partition_state(arr, assignment, k, centroid_update)
    history = [value]
    for _ in range(MAX_ITERATIONS):
        new_assignment = _repair_empty(arr, d, d.argmin(axis=1), k)
        if (new_assignment == assignment).all():
            break
        new_centroids, new_d, new_value = _partition_state(arr, new_assignment, k, centroid_update)
        if new_value >= value:
            break
        assignment, centroids, d, value = new_assignment, new_centroids, new_d, new_value
        history.append(value)

    dist_own = d[np.arange(n), assignment]
    mean_iou = float((1.0 - dist_own).mean())
    sil = _silhouette(arr, assignment, k) if k >= 2 else 0.0
    return ClusteringResult(
        k=k,
        centroids=tuple(BoxShape(float(w), float(h)) for w, h in centroids),
        assignment=tuple(int(a) for a in assignment),
        mean_iou=mean_iou,
        sse=value,
        mean_silhouette=sil,
        sse_history=tuple(history),
    )


def sse(result: ClusteringResult, shapes) -> float:
    """Sum of squared distances of every shape to its assigned centroid."""
    arr = _as_array(shapes)
    if len(result.assignment) != arr.shape[0]:
        raise ValueError("assignment length does not match shapes")
    cents = np.array([(c.width, c.height) for c in result.centroids])
    d = 1.0 - _pair_iou(arr, cents)
    return float((d[np.arange(arr.shape[0]), list(result.assignment)] ** 2).sum())


def _silhouette(arr: np.ndarray, assignment: np.ndarray, k: int) -> float:
    d = 1.0 - _pair_iou(arr, arr)
    n = arr.shape[0]
    scores = np.zeros(n)
    sizes = np.bincount(assignment, minlength=k)
    for i in range(n):
        own = assignment[i]
        if sizes[own] <= 1:
            continue  # singleton convention: score 0
        a_i = d[i, assignment == own].sum() / (sizes[own] - 1)
        b_i = min(
            d[i, assignment == j].mean()
            for j in range(k)
            if j != own and sizes[j] > 0
        )
        denom = max(a_i, b_i)
        scores[i] = 0.0 if denom == 0.0 else (b_i - a_i) / denom
    return float(scores.mean())


def mean_silhouette(result: ClusteringResult, shapes) -> float:
    """Mean silhouette score of a clustering; singletons score 0."""
    if result.k < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    arr = _as_array(shapes)
    return _silhouette(arr, np.asarray(result.assignment), result.k)


def select_k(shapes, k_range, seed: int = 0) -> tuple[int, list[ClusteringResult]]:
    """Cluster for every k and pick the elbow of the SSE curve.

    Emits a warning when the chosen k is not divisible by 3 (three output
    scales need an integral per-scale anchor count).
    """
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("empty k range")
    diagnostics = [kmeans_iou(shapes, k, seed=seed) for k in ks]
    if len(ks) < 3:
        best = min(diagnostics, key=lambda r: r.sse).k
    else:
        from .imaging import _elbow_index

        best = ks[_elbow_index(ks, [r.sse for r in diagnostics])]
    if best % 3 != 0:
        warnings.warn(
            f"selected k={best} is not divisible by 3; the three-scale "
            "anchor partition needs k/3 integral",
            stacklevel=2,
        )
    return best, diagnostics


def partition_anchors_by_scale(centroids) -> tuple[list[BoxShape], list[BoxShape], list[BoxShape]]:
    """Split anchors into three area-sorted groups, finest scale first."""
    cents = list(centroids)
    if len(cents) % 3 != 0:
        raise ValueError(f"{len(cents)} anchors cannot be split into 3 scales")
    cents.sort(key=lambda c: (c.area, c.width))
    b = len(cents) // 3
    return cents[:b], cents[b:2 * b], cents[2 * b:]
