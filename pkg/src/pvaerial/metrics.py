"""Detection quality evaluation in the PASCAL-VOC style.

Greedy confidence-ranked matching at an IoU threshold, precision/recall/
F1, all-point interpolated average precision, mAP, and the two-sample
Kolmogorov-Smirnov statistic for coverage-distribution comparison.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Annotation, Detection, iou
from . import dataset as ds

__all__ = [
    "MatchResult",
    "PRCurve",
    "EvalRow",
    "EvalResult",
    "match_detections",
    "prf",
    "prf_counts",
    "pr_curve",
    "average_precision",
    "mean_ap",
    "ks_index",
    "evaluate_run",
    "write_metrics_csv",
    "format_metrics_table",
]


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching outcome at one IoU threshold."""

    iou_thr: float
    tp: int
    fp: int
    fn: int
    per_class: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    # per class: confidence-ranked (confidence, is_tp) pairs and GT count
    ranked: dict[str, list[tuple[float, bool]]] = field(default_factory=dict)
    gt_counts: dict[str, int] = field(default_factory=dict)


def _det_rank_key(item):
    image_id, d = item
    return (-d.confidence, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, image_id)


def _match_per_class(
    dets: list[tuple[str, Detection]],
    gts: list[tuple[str, Annotation]],
    iou_thr: float,
) -> tuple[list[tuple[float, bool]], int, int, int]:
    """Greedy match of one class across images; returns (ranked, tp, fp, fn)."""
    by_image: dict[str, list[Annotation]] = {}
    for image_id, gt in gts:
        by_image.setdefault(image_id, []).append(gt)
    matched: dict[str, list[bool]] = {k: [False] * len(v) for k, v in by_image.items()}

    ranked = []
    tp = 0
    for image_id, det in sorted(dets, key=_det_rank_key):
        candidates = by_image.get(image_id, [])
        best_iou, best_j = 0.0, None
        for j, gt in enumerate(candidates):
            if matched[image_id][j]:
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j is not None and best_iou >= iou_thr:
            matched[image_id][best_j] = True
            tp += 1
            ranked.append((det.confidence, True))
        else:
            ranked.append((det.confidence, False))
    fp = len(dets) - tp
    fn = len(gts) - tp
    return ranked, tp, fp, fn


def match_detections(dets, gts, iou_thr: float, image_ids=None) -> MatchResult:
    """Greedy per-class matching of detections against ground truths.

    Within each class the detections are sorted by descending confidence
    (coordinate tie-breaks); each takes the unmatched ground truth of
    highest IoU when that IoU reaches the threshold.  ``image_ids`` may
    give per-item image identifiers as (det_ids, gt_ids) for multi-image
    evaluation; by default everything shares one image.
    """
    det_ids, gt_ids = image_ids if image_ids is not None else (None, None)
    dets = list(dets)
    gts = list(gts)
    det_items = list(zip(det_ids or [""] * len(dets), dets))
    gt_items = list(zip(gt_ids or [""] * len(gts), gts))

    classes = sorted({d.class_label for _, d in det_items} | {g.class_label for _, g in gt_items})
    per_class = {}
    ranked = {}
    gt_counts = {}
    tp_all = fp_all = fn_all = 0
    for c in classes:
        c_dets = [(i, d) for i, d in det_items if d.class_label == c]
        c_gts = [(i, g) for i, g in gt_items if g.class_label == c]
        c_ranked, tp, fp, fn = _match_per_class(c_dets, c_gts, iou_thr)
        per_class[c] = (tp, fp, fn)
        ranked[c] = c_ranked
        gt_counts[c] = len(c_gts)
        tp_all += tp
        fp_all += fp
        fn_all += fn
    return MatchResult(iou_thr, tp_all, fp_all, fn_all, per_class, ranked, gt_counts)


def prf_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1 from raw counts; 0/0 cases resolve to 0."""
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0
    return prec, rec, f1


def prf(match: MatchResult) -> tuple[float, float, float]:
    """Precision, recall and F1 of a matching, pooled over classes."""
    return prf_counts(match.tp, match.fp, match.fn)


@dataclass(frozen=True)
class PRCurve:
    """Recall/precision sweep over a confidence-ranked detection list."""

    recalls: tuple[float, ...]
    precisions: tuple[float, ...]
    ap: float


def pr_curve(ranked, n_gt: int) -> PRCurve:
    """PR sweep and its all-point interpolated area.

    ``ranked`` is the confidence-ordered list of (confidence, is_tp)
    flags; ``n_gt`` the number of ground truths of the class.
    """
    flags = np.array([bool(tp) for _, tp in ranked], dtype=bool)
    if flags.size == 0 or n_gt == 0:
        return PRCurve((), (), 0.0)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    rec = tp_cum / n_gt
    prec = tp_cum / (tp_cum + fp_cum)

    # monotone envelope, integrated exactly over recall
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return PRCurve(tuple(rec.tolist()), tuple(prec.tolist()), ap)


def average_precision(ranked, n_gt: int, eleven_point: bool = False) -> float:
    """Area under the interpolated PR curve for one class.

    Defined as 0 when the class has no ground truths or no detections.
    The optional eleven-point mode samples the envelope at recalls
    0, 0.1, ..., 1 instead of integrating exactly.
    """
    if not eleven_point:
        return pr_curve(ranked, n_gt).ap
    flags = np.array([bool(tp) for _, tp in ranked], dtype=bool)
    if flags.size == 0 or n_gt == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    rec = tp_cum / n_gt
    prec = tp_cum / (tp_cum + fp_cum)
    total = 0.0
    for r in np.linspace(0.0, 1.0, 11):
        mask = rec >= r - 1e-12
        total += float(prec[mask].max()) if mask.any() else 0.0
    return total / 11.0


def mean_ap(aps) -> float:
    """Unweighted arithmetic mean of per-class AP values."""
    values = list(aps.values()) if isinstance(aps, dict) else list(aps)
    if not values:
        raise ValueError("no classes to average")
    return float(sum(values)) / len(values)


def ks_index(sample_a, sample_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: sup |F_a - F_b|."""
    a = np.sort(np.asarray(list(sample_a), dtype=np.float64))
    b = np.sort(np.asarray(list(sample_b), dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS index needs non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.abs(fa - fb).max())


# ---------------------------------------------------------------------------
# directory-level evaluation

@dataclass(frozen=True)
class EvalRow:
    class_label: str
    iou_thr: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float


@dataclass(frozen=True)
class EvalResult:
    rows: tuple[EvalRow, ...]
    map_by_iou: dict[float, float]


def evaluate_run(
    detections_dir: str | Path,
    annotations_dir: str | Path,
    iou_thresholds=(0.3, 0.4, 0.5, 0.7),
    classes=None,
) -> EvalResult:
    """Evaluate a directory of detection CSVs against VOC XML annotations.

    Files pair by stem; a detection CSV without a matching annotation is
    an error (annotations without detections count as all-missed).
    """
    detections_dir = Path(detections_dir)
    annotations_dir = Path(annotations_dir)
    ann_files = {p.stem: p for p in sorted(annotations_dir.glob("*.xml"))}
    det_files = {p.stem: p for p in sorted(detections_dir.glob("*.csv"))}
    orphans = sorted(set(det_files) - set(ann_files))
    if orphans:
        raise ValueError(f"detection files without annotations: {orphans}")

    det_items: list[tuple[str, Detection]] = []
    gt_items: list[tuple[str, Annotation]] = []
    for stem, ann_path in ann_files.items():
        sample = ds.load_annotations(ann_path)
        gt_items.extend((stem, a) for a in sample.annotations)
        if stem in det_files:
            det_items.extend((stem, d) for d in ds.read_detections_csv(det_files[stem]))

    if classes is None:
        classes = sorted({a.class_label for _, a in gt_items}
                         | {d.class_label for _, d in det_items})

    rows = []
    map_by_iou = {}
    for thr in iou_thresholds:
        match = match_detections(
            [d for _, d in det_items],
            [g for _, g in gt_items],
            thr,
            image_ids=([i for i, _ in det_items], [i for i, _ in gt_items]),
        )
        aps = {}
        for c in classes:
            tp, fp, fn = match.per_class.get(c, (0, 0, 0))
            n_gt = match.gt_counts.get(c, 0)
            ap = average_precision(match.ranked.get(c, []), n_gt)
            prec, rec, f1 = prf_counts(tp, fp, fn)
            aps[c] = ap
            rows.append(EvalRow(c, thr, tp, fp, fn, prec, rec, f1, ap))
        map_by_iou[thr] = mean_ap(aps) if aps else 0.0
    return EvalResult(tuple(rows), map_by_iou)


def write_metrics_csv(result: EvalResult, path: str | Path) -> None:
    """Fixed-column metrics CSV with one mAP summary row per threshold."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou", "tp", "fp", "fn", "prec", "rec", "f1", "ap"])
        for r in result.rows:
            writer.writerow([
                r.class_label, f"{r.iou_thr:g}", r.tp, r.fp, r.fn,
                f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}", f"{r.ap:.6f}",
            ])
        for thr, m in result.map_by_iou.items():
            writer.writerow(["mAP", f"{thr:g}", "", "", "", "", "", "", f"{m:.6f}"])


def format_metrics_table(result: EvalResult) -> str:
    """Aligned text rendering of the evaluation tables."""
    header = f"{'class':<16}{'iou':>5}{'tp':>7}{'fp':>7}{'fn':>7}" \
             f"{'prec%':>9}{'rec%':>9}{'f1%':>9}{'ap%':>9}"
    lines = [header, "-" * len(header)]
    for r in result.rows:
        lines.append(
            f"{r.class_label:<16}{r.iou_thr:>5g}{r.tp:>7}{r.fp:>7}{r.fn:>7}"
            f"{r.precision * 100:>9.2f}{r.recall * 100:>9.2f}"
            f"{r.f1 * 100:>9.2f}{r.ap * 100:>9.2f}"
        )
    for thr, m in result.map_by_iou.items():
        lines.append(f"{'mAP':<16}{thr:>5g}{'':>37}{m * 100:>9.2f}")
    return "\n".join(lines) + "\n"
