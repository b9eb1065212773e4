"""Inference-time augmentation and detection merging.

Three views (original, horizontal flip, vertical flip) are inferred
independently; the flipped candidates are mapped back into the original
frame and merged against the original detections, which are never
pruned.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    BoundingBox,
    Detection,
    RigidTransform,
    identity_transform,
    invert,
    iou,
    transform_box,
)

__all__ = ["DetectionSet", "tta_views", "merge_tta", "nms_standard"]

DEFAULT_PANEL_IOU_THR = 0.2


@dataclass(frozen=True)
class DetectionSet:
    """Per-image detections plus the transform of the frame they live in.

    ``transform`` maps the reference frame of the surrounding pipeline
    into the frame the boxes are expressed in; an identity transform
    means the boxes are already in the reference frame.
    """

    image_id: str
    transform: RigidTransform
    detections: tuple[Detection, ...]

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))


def tta_views(img: np.ndarray) -> list[tuple[np.ndarray, RigidTransform]]:
    """The three inference views: identity, horizontal flip, vertical flip."""
    h, w = img.shape[:2]
    return [
        (img, identity_transform(w, h)),
        (np.flip(img, axis=1).copy(), RigidTransform(0.0, True, False, (w, h))),
        (np.flip(img, axis=0).copy(), RigidTransform(0.0, False, True, (w, h))),
    ]


def _sort_key(d: Detection):
    # descending confidence; ties by higher x_min, then higher y_min
    return (-d.confidence, -d.box.x_min, -d.box.y_min, -d.box.x_max, -d.box.y_max, d.class_label)


def merge_tta(
    real: DetectionSet,
    candidates,
    iou_thr: float = DEFAULT_PANEL_IOU_THR,
    class_aware: bool = False,
) -> DetectionSet:
    """Merge flipped-view candidates into the original-view detections.

    Candidates are first mapped into the real set's frame through the
    inverse of their view transforms, then processed in decreasing
    confidence order: a candidate joins the output only when its IoU with
    every box already there stays below ``iou_thr``.  The original
    detections are kept unconditionally.
    """
    merged = list(real.detections)
    pool: list[Detection] = []
    for cand in candidates:
        t_inv = invert(cand.transform)
        if tuple(t_inv.dst_size) != tuple(real.transform.dst_size):
            raise ValueError(
                f"candidate view frame {cand.transform.src_size} does not map back "
                f"onto the real frame {real.transform.dst_size}")
        for det in cand.detections:
            pool.append(replace(det, box=transform_box(det.box, t_inv)))

    pool.sort(key=_sort_key)
    for det in pool:
        against = (
            [m for m in merged if m.class_label == det.class_label]
            if class_aware else merged
        )
        if all(iou(det.box, m.box) < iou_thr for m in against):
            merged.append(det)
    return DetectionSet(real.image_id, real.transform, tuple(merged))


def nms_standard(dets, iou_thr: float = 0.45, class_aware: bool = True) -> list[Detection]:
    """Classic greedy suppression by descending confidence."""
    kept: list[Detection] = []
    for det in sorted(dets, key=_sort_key):
        against = (
            [m for m in kept if m.class_label == det.class_label]
            if class_aware else kept
        )
        if all(iou(det.box, m.box) < iou_thr for m in against):
            kept.append(det)
    return kept
