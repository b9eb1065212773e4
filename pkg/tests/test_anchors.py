import numpy as np
import pytest

from pvaerial.anchors import (
    BoxShape,
    ClusteringResult,
    kmeans_iou,
    mean_silhouette,
    partition_anchors_by_scale,
    select_k,
    shape_distance,
    sse,
)


def brute_force_min_sse(arr: np.ndarray, k: int) -> float:
    """Exhaustive partition oracle: best SSE over all k-partitions with
    element-wise-median centroids, enumerated via restricted growth strings."""

    def dist2(members, c):
        inter = np.minimum(members[:, 0], c[0]) * np.minimum(members[:, 1], c[1])
        union = members[:, 0] * members[:, 1] + c[0] * c[1] - inter
        return ((1.0 - inter / union) ** 2).sum()

    n = arr.shape[0]
    best = [np.inf]

    def recurse(i, labels, used):
        if i == n:
            if used == k:
                s = 0.0
                lab = np.array(labels)
                for j in range(k):
                    members = arr[lab == j]
                    s += dist2(members, np.median(members, axis=0))
                best[0] = min(best[0], s)
            return
        if used + (n - i) < k:
            return
        for j in range(min(used + 1, k)):
            labels.append(j)
            recurse(i + 1, labels, max(used, j + 1))
            labels.pop()

    recurse(0, [], 0)
    return best[0]


def test_shape_distance_identical():
    assert shape_distance(BoxShape(10, 20), BoxShape(10, 20)) == 0.0


def test_shape_distance_containment():
    # co-centred containment: IoU is the area ratio 4/16
    assert abs(shape_distance(BoxShape(2, 2), BoxShape(4, 4)) - 0.75) < 1e-12


def test_shape_distance_cross():
    # cross overlap 1, union 4 + 4 - 1
    assert abs(shape_distance(BoxShape(1, 4), BoxShape(4, 1)) - 6 / 7) < 1e-12


def test_shape_distance_is_dissimilarity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = BoxShape(*rng.uniform(0.5, 50, 2))
        b = BoxShape(*rng.uniform(0.5, 50, 2))
        d = shape_distance(a, b)
        assert 0.0 <= d <= 1.0
        assert abs(d - shape_distance(b, a)) < 1e-15
        assert shape_distance(a, a) == 0.0
        if (a.width, a.height) != (b.width, b.height):
            assert d > 0.0


def test_shape_validation():
    with pytest.raises(ValueError):
        BoxShape(0, 5)


def test_kmeans_single_cluster_median_centroid():
    res = kmeans_iou([BoxShape(2, 2), BoxShape(4, 4)], 1, seed=0)
    assert res.centroids == (BoxShape(3.0, 3.0),)
    # two-term hand sum: d((2,2),(3,3)) = 5/9, d((4,4),(3,3)) = 7/16
    expected = (5 / 9) ** 2 + (7 / 16) ** 2
    assert abs(res.sse - expected) < 1e-12


def test_kmeans_k_equals_n():
    shapes = [BoxShape(3, 4), BoxShape(8, 2), BoxShape(5, 5)]
    res = kmeans_iou(shapes, 3, seed=0)
    assert res.sse == 0.0 and res.mean_iou == 1.0


def test_kmeans_two_separated_groups():
    shapes = [BoxShape(10, 10)] * 5 + [BoxShape(100, 100)] * 5
    res = kmeans_iou(shapes, 2, seed=1)
    assert res.sse == 0.0
    first = set(res.assignment[:5])
    second = set(res.assignment[5:])
    assert len(first) == 1 and len(second) == 1 and first != second


def test_kmeans_k_exceeds_distinct():
    with pytest.raises(ValueError):
        kmeans_iou([BoxShape(5, 5)] * 4, 2, seed=0)
    with pytest.raises(ValueError):
        kmeans_iou([BoxShape(5, 5)], 0, seed=0)


def test_kmeans_deterministic():
    rng = np.random.default_rng(2)
    shapes = [BoxShape(*rng.uniform(1, 60, 2)) for _ in range(30)]
    a = kmeans_iou(shapes, 4, seed=9)
    b = kmeans_iou(shapes, 4, seed=9)
    assert a == b


def test_kmeans_sse_monotone_history():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(3, 14))
        k = int(rng.integers(1, min(n, 6)))
        shapes = [BoxShape(*rng.uniform(1, 100, 2)) for _ in range(n)]
        try:
            res = kmeans_iou(shapes, k, seed=int(rng.integers(10 ** 6)))
        except ValueError:
            continue
        h = res.sse_history
        assert all(b <= a + 1e-12 for a, b in zip(h, h[1:]))


def test_kmeans_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(25):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, min(n, 4) + 1))
        arr = rng.uniform(1, 100, size=(n, 2))
        shapes = [BoxShape(w, h) for w, h in arr]
        try:
            best = min(kmeans_iou(shapes, k, seed=s).sse for s in range(48))
        except ValueError:
            continue
        assert abs(best - brute_force_min_sse(arr, k)) < 1e-9


def test_kmeans_scale_doubling_invariance():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(4, 16))
        arr = rng.uniform(1, 50, size=(n, 2))
        s1 = [BoxShape(w, h) for w, h in arr]
        s2 = [BoxShape(2 * w, 2 * h) for w, h in arr]
        r1 = kmeans_iou(s1, 3, seed=7)
        r2 = kmeans_iou(s2, 3, seed=7)
        assert r1.assignment == r2.assignment
        assert abs(r1.sse - r2.sse) < 1e-12
        assert abs(r1.mean_iou - r2.mean_iou) < 1e-12
        assert abs(r1.mean_silhouette - r2.mean_silhouette) < 1e-12


def test_mean_iou_nondecreasing_in_k():
    rng = np.random.default_rng(6)
    shapes = [BoxShape(*rng.uniform(1, 80, 2)) for _ in range(40)]
    best_by_k = []
    for k in range(1, 7):
        best_by_k.append(max(kmeans_iou(shapes, k, seed=s).mean_iou for s in range(8)))
    assert all(b >= a - 1e-9 for a, b in zip(best_by_k, best_by_k[1:]))


def test_sse_function_consistency():
    rng = np.random.default_rng(7)
    shapes = [BoxShape(*rng.uniform(1, 60, 2)) for _ in range(15)]
    res = kmeans_iou(shapes, 3, seed=0)
    assert abs(sse(res, shapes) - res.sse) < 1e-12


def test_sse_zero_when_exact():
    shapes = [BoxShape(2, 2), BoxShape(4, 4)]
    res = kmeans_iou(shapes, 2, seed=0)
    assert sse(res, shapes) == 0.0


def test_silhouette_two_tight_groups():
    rng = np.random.default_rng(8)
    shapes = ([BoxShape(10 + rng.uniform(-0.2, 0.2), 10 + rng.uniform(-0.2, 0.2)) for _ in range(6)]
              + [BoxShape(100 + rng.uniform(-1, 1), 100 + rng.uniform(-1, 1)) for _ in range(6)])
    res = kmeans_iou(shapes, 2, seed=0)
    assert mean_silhouette(res, shapes) > 0.9


def test_silhouette_identical_shapes_zero():
    # all shapes equal, forced into 2 clusters by construction
    shapes = [BoxShape(5, 5)] * 4
    res = ClusteringResult(
        k=2, centroids=(BoxShape(5, 5), BoxShape(5, 5)),
        assignment=(0, 0, 1, 1), mean_iou=1.0, sse=0.0,
        mean_silhouette=0.0, sse_history=(0.0,))
    assert mean_silhouette(res, shapes) == 0.0


def test_silhouette_singleton_zero():
    shapes = [BoxShape(10, 10), BoxShape(10.5, 10), BoxShape(80, 80)]
    res = kmeans_iou(shapes, 2, seed=0)
    # the lone member of its cluster contributes 0 by convention
    singleton_cluster = [c for c in range(2) if res.assignment.count(c) == 1]
    assert singleton_cluster
    assert -1.0 <= mean_silhouette(res, shapes) <= 1.0


def test_silhouette_needs_two_clusters():
    shapes = [BoxShape(2, 2), BoxShape(4, 4)]
    res = kmeans_iou(shapes, 1, seed=0)
    with pytest.raises(ValueError):
        mean_silhouette(res, shapes)


def test_select_k_planted_modes():
    rng = np.random.default_rng(9)
    shapes = ([BoxShape(10 + rng.uniform(-1, 1), 10 + rng.uniform(-1, 1)) for _ in range(10)]
              + [BoxShape(60 + rng.uniform(-3, 3), 20 + rng.uniform(-2, 2)) for _ in range(10)]
              + [BoxShape(200 + rng.uniform(-5, 5), 200 + rng.uniform(-5, 5)) for _ in range(10)])
    best, diagnostics = select_k(shapes, range(1, 9), seed=0)
    assert best == 3
    assert [d.k for d in diagnostics] == list(range(1, 9))


def test_select_k_single_choice():
    shapes = [BoxShape(3, 3), BoxShape(9, 9)]
    with pytest.warns(UserWarning):  # k=1 is not divisible by 3
        best, diagnostics = select_k(shapes, [1], seed=0)
    assert best == 1 and len(diagnostics) == 1


def test_select_k_warns_on_nondivisible():
    shapes = [BoxShape(10, 10), BoxShape(11, 11), BoxShape(100, 100), BoxShape(101, 101)]
    with pytest.warns(UserWarning, match="divisible by 3"):
        select_k(shapes, [2], seed=0)


def test_partition_by_scale():
    cents = [BoxShape(i + 1.0, i + 1.0) for i in range(9)]
    fine, mid, coarse = partition_anchors_by_scale(cents)
    assert [c.width for c in fine] == [1.0, 2.0, 3.0]
    assert [c.width for c in mid] == [4.0, 5.0, 6.0]
    assert [c.width for c in coarse] == [7.0, 8.0, 9.0]
    two_each = partition_anchors_by_scale(cents[:6])
    assert [len(g) for g in two_each] == [2, 2, 2]
    with pytest.raises(ValueError):
        partition_anchors_by_scale(cents[:8])
