import itertools
import random

import numpy as np
import pytest

from pvaerial.core import (
    BoundingBox,
    Detection,
    RigidTransform,
    identity_transform,
    invert,
    iou,
    transform_box,
)
from pvaerial.fusion import DetectionSet, merge_tta, nms_standard, tta_views


def _det(x0, y0, x1, y1, conf, label="panel"):
    return Detection(BoundingBox(x0, y0, x1, y1), label, conf)


def _snap(v):
    # dyadic grid: bit-exact under the flip maps x -> W - x, y -> H - y
    return round(v * 16) / 16


def _rand_det(rng, label="panel", lim=100):
    x0 = _snap(rng.uniform(0, lim - 5))
    y0 = _snap(rng.uniform(0, lim - 5))
    return Detection(
        BoundingBox(x0, y0, _snap(x0 + rng.uniform(1, lim - x0)),
                    _snap(y0 + rng.uniform(1, lim - y0))),
        label, round(rng.uniform(0, 1), 6))


def reference_merge(real, candidates, thr):
    """Literal step-by-step simulation of the published merge procedure."""
    bb_r = list(real)
    bb_c = sorted(candidates,
                  key=lambda d: (-d.confidence, -d.box.x_min, -d.box.y_min,
                                 -d.box.x_max, -d.box.y_max, d.class_label))
    while bb_c:
        cand = bb_c.pop(0)
        if all(iou(cand.box, kept.box) < thr for kept in bb_r):
            bb_r.append(cand)
    return bb_r


# --- views ------------------------------------------------------------------

def test_three_views_involution():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(40, 60)).astype(np.uint8)
    views = tta_views(img)
    assert len(views) == 3
    assert np.array_equal(views[0][0], img)
    assert np.array_equal(np.flip(views[1][0], axis=1), img)
    assert np.array_equal(np.flip(views[2][0], axis=0), img)


def test_views_pairwise_distinct_on_asymmetric_pattern():
    img = np.zeros((20, 30), dtype=np.uint8)
    img[2:5, 3:9] = 255
    views = [v for v, _ in tta_views(img)]
    for a, b in itertools.combinations(views, 2):
        assert not np.array_equal(a, b)


def test_view_transforms_roundtrip_boxes():
    rng = random.Random(3)
    img = np.zeros((200, 100), dtype=np.uint8)
    for _, t in tta_views(img):
        for _ in range(100):
            x0, y0 = rng.randint(0, 98), rng.randint(0, 198)
            b = BoundingBox(x0, y0, rng.randint(x0 + 1, 100), rng.randint(y0 + 1, 200))
            assert transform_box(transform_box(b, t), invert(t)) == b


# --- merge ------------------------------------------------------------------

def _as_sets(real_dets, cand_dets, w=100, h=100):
    ident = identity_transform(w, h)
    real = DetectionSet("img", ident, tuple(real_dets))
    cands = [
        DetectionSet("img", RigidTransform(0, True, False, (w, h)),
                     tuple(Detection(transform_box(d.box, RigidTransform(0, True, False, (w, h))),
                                     d.class_label, d.confidence)
                           for d in cand_dets))
    ]
    return real, cands


def test_merge_no_candidates():
    real = DetectionSet("img", identity_transform(100, 100), (_det(0, 0, 10, 10, 0.9),))
    out = merge_tta(real, [])
    assert out.detections == real.detections


def test_merge_discards_duplicate():
    real, cands = _as_sets([_det(0, 0, 10, 10, 0.9)], [_det(0, 0, 10, 10, 0.8)])
    out = merge_tta(real, cands, iou_thr=0.2)
    assert len(out.detections) == 1


def test_merge_sequential_example():
    # B joins (disjoint from A), then C hits B with IoU 64/136 >= 0.2
    a = _det(0, 0, 10, 10, 0.95)
    b = _det(50, 50, 60, 60, 0.9)
    c = _det(52, 52, 62, 62, 0.8)
    real, cands = _as_sets([a], [b, c])
    out = merge_tta(real, cands, iou_thr=0.2)
    boxes = [d.box for d in out.detections]
    assert a.box in boxes
    assert BoundingBox(50, 50, 60, 60) in [d.box for d in out.detections]
    assert len(out.detections) == 2


def test_merge_matches_reference_simulation():
    rng = random.Random(11)
    ident = identity_transform(100, 100)
    flip_h = RigidTransform(0, True, False, (100, 100))
    flip_v = RigidTransform(0, False, True, (100, 100))
    for _ in range(200):
        real_dets = [_rand_det(rng) for _ in range(rng.randint(0, 5))]
        cand_orig = [_rand_det(rng) for _ in range(rng.randint(0, 8))]
        n1 = rng.randint(0, len(cand_orig))
        set_h = [Detection(transform_box(d.box, flip_h), d.class_label, d.confidence)
                 for d in cand_orig[:n1]]
        set_v = [Detection(transform_box(d.box, flip_v), d.class_label, d.confidence)
                 for d in cand_orig[n1:]]
        real = DetectionSet("img", ident, tuple(real_dets))
        cands = [DetectionSet("img", flip_h, tuple(set_h)),
                 DetectionSet("img", flip_v, tuple(set_v))]
        out = merge_tta(real, cands, iou_thr=0.2)
        expected = reference_merge(real_dets, cand_orig, 0.2)
        assert [d.box for d in out.detections] == [d.box for d in expected]
        # every original detection survives
        for d in real_dets:
            assert d in out.detections
        # cross-view additions stay below the threshold against all others
        added = out.detections[len(real_dets):]
        for d in added:
            others = [m for m in out.detections if m is not d]
            kept_before = out.detections[:out.detections.index(d)]
            assert all(iou(d.box, m.box) < 0.2 for m in kept_before)
        assert len(out.detections) <= len(real_dets) + len(cand_orig)


def test_merge_order_independent_given_global_sort():
    rng = random.Random(13)
    ident = identity_transform(100, 100)
    flip_h = RigidTransform(0, True, False, (100, 100))
    flip_v = RigidTransform(0, False, True, (100, 100))
    real = DetectionSet("img", ident, tuple(_rand_det(rng) for _ in range(3)))
    s1 = DetectionSet("img", flip_h,
                      tuple(Detection(transform_box(_rand_det(rng).box, flip_h), "panel",
                                      round(rng.uniform(0, 1), 6)) for _ in range(4)))
    s2 = DetectionSet("img", flip_v,
                      tuple(Detection(transform_box(_rand_det(rng).box, flip_v), "panel",
                                      round(rng.uniform(0, 1), 6)) for _ in range(4)))
    a = merge_tta(real, [s1, s2], iou_thr=0.2)
    b = merge_tta(real, [s2, s1], iou_thr=0.2)
    assert a == b


def test_merge_class_aware_mode():
    real, cands = _as_sets([_det(0, 0, 10, 10, 0.9, "panel")],
                           [_det(0, 0, 10, 10, 0.8, "other")])
    blind = merge_tta(real, cands, iou_thr=0.2, class_aware=False)
    aware = merge_tta(real, cands, iou_thr=0.2, class_aware=True)
    assert len(blind.detections) == 1
    assert len(aware.detections) == 2


def test_merge_frame_mismatch_rejected():
    real = DetectionSet("img", identity_transform(100, 100), ())
    bad = DetectionSet("img", RigidTransform(0, True, False, (50, 50)), ())
    with pytest.raises(ValueError):
        merge_tta(real, [bad])


# --- standard NMS -----------------------------------------------------------

def test_nms_single_detection():
    d = _det(0, 0, 10, 10, 0.9)
    assert nms_standard([d], 0.5) == [d]


def test_nms_keeps_highest_confidence():
    hi = _det(0, 0, 10, 10, 0.9)
    lo = _det(0, 0, 10, 10, 0.8)
    assert nms_standard([lo, hi], 0.5) == [hi]


def brute_force_nms(dets, thr):
    order = sorted(dets, key=lambda d: (-d.confidence, -d.box.x_min, -d.box.y_min,
                                        -d.box.x_max, -d.box.y_max, d.class_label))
    kept = []
    for d in order:
        if all(not (m.class_label == d.class_label and iou(d.box, m.box) >= thr)
               for m in kept):
            kept.append(d)
    return kept


def test_nms_matches_bruteforce():
    rng = random.Random(17)
    for _ in range(50):
        dets = [_rand_det(rng, label=rng.choice(["a", "b"])) for _ in range(20)]
        assert nms_standard(dets, 0.4) == brute_force_nms(dets, 0.4)
