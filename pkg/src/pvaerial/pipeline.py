"""The multi-stage inspection flow.

Rotation correction -> panel detection with flip augmentation -> defect
detection -> false alarm filtering against the detected panels -> thermal
severity grading (IR) or soiling coverage reporting (VIS).
"""

from __future__ import annotations

import enum
import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

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
from .detector import DetectorHandle, detect
from .fusion import DetectionSet, merge_tta, nms_standard, tta_views
from .imaging import (
    CannyConfig,
    FeaturelessImageError,
    HoughError,
    ThermalCalibration,
    canny_adaptive,
    hough_dominant_line,
    rotate_image,
    rotation_angle_from_line,
    temperature_map,
    to_grayscale,
)

__all__ = [
    "PipelineConfig",
    "Severity",
    "SeverityReport",
    "CoverageReport",
    "ImageReport",
    "StageTimings",
    "detect_rotation_angle",
    "run_panel_stage",
    "run_defect_stage",
    "false_alarm_filter",
    "classify_severity",
    "hotspot_gradient",
    "soiling_coverage",
    "render_report_text",
    "emit_report",
    "inspect_image",
]


class Severity(enum.IntEnum):
    """Defect severity grades ordered by urgency."""

    NORMAL = 0
    HEATED_CELLS = 1
    SEVERE = 2
    EXTREMELY_SEVERE = 3

    @property
    def label(self) -> str:
        return _SEVERITY_LABELS[self]


_SEVERITY_LABELS = {
    Severity.NORMAL: "Normal",
    Severity.HEATED_CELLS: "Heated Cell(s)",
    Severity.SEVERE: "Severe hotspot",
    Severity.EXTREMELY_SEVERE: "Extremely Severe hotspot",
}

SEVERITY_ACTIONS = {
    Severity.NORMAL: "None",
    Severity.HEATED_CELLS: "Careful check in regular thermographic inspections",
    Severity.SEVERE: "Replacement of the defective module",
    Severity.EXTREMELY_SEVERE: "Immediate replacement of the defective module",
}


@dataclass(frozen=True)
class PipelineConfig:
    """Thresholds, calibration and policy knobs for one inspection run."""

    spectrum: str = "ir"
    iou_thr_panel: float = 0.2
    iou_thr_defect: float = 0.5
    filter_mode: str = "intersection-over-defect"  # or "strict-iou"
    severity_breakpoints: tuple[float, float, float] = (10.0, 20.0, 30.0)
    calibration: ThermalCalibration = ThermalCalibration(0.04, -273.15)
    canny: CannyConfig = CannyConfig()
    hough_decay: float = 0.9
    hough_vote_floor: int = 10
    per_view_nms: bool = True
    per_view_nms_thr: float = 0.45
    class_aware_merge: bool = False
    severity_classes: tuple[str, ...] = ("hotspot",)
    coverage_classes: tuple[str, ...] = ("strong_soiling",)
    defect_dilation_px: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.spectrum not in ("ir", "vis"):
            raise ValueError(f"spectrum must be 'ir' or 'vis', got {self.spectrum!r}")
        if not (0.0 < self.iou_thr_panel < 1.0) or not (0.0 < self.iou_thr_defect < 1.0):
            raise ValueError("IoU thresholds must lie in (0, 1)")
        if self.filter_mode not in ("intersection-over-defect", "strict-iou"):
            raise ValueError(f"unknown filter mode {self.filter_mode!r}")
        bp = self.severity_breakpoints
        if not (0 < bp[0] < bp[1] < bp[2]):
            raise ValueError(f"severity breakpoints must increase, got {bp}")


@dataclass(frozen=True)
class SeverityReport:
    """Graded thermal defect with the prescribed maintenance action."""

    detection: Detection
    delta_t: float
    severity: Severity
    action: str
    used_fallback: bool = False


@dataclass(frozen=True)
class CoverageReport:
    """Fraction of one panel's area covered by a defect box."""

    panel_index: int
    defect_class: str
    coverage: float

    def __post_init__(self):
        if not (0.0 <= self.coverage <= 1.0):
            raise ValueError(f"coverage {self.coverage} outside [0, 1]")


@dataclass(frozen=True)
class StageTimings:
    rotation_s: float = 0.0
    panel_s: float = 0.0
    defect_s: float = 0.0
    filter_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.rotation_s + self.panel_s + self.defect_s + self.filter_s


@dataclass
class ImageReport:
    """Everything the pipeline produced for one input image."""

    image: str
    spectrum: str
    rotation_deg: float
    panels: DetectionSet
    defects_raw: DetectionSet
    defects: DetectionSet
    severities: list[SeverityReport] = field(default_factory=list)
    coverages: list[CoverageReport] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    timings: StageTimings = StageTimings()


# ---------------------------------------------------------------------------
# stages

def detect_rotation_angle(img: np.ndarray, cfg: PipelineConfig) -> tuple[float, list[str]]:
    """Skew of the dominant panel direction; 0 with a warning when featureless."""
    gray = to_grayscale(img)
    try:
        canny = canny_adaptive(gray, cfg.canny)
        line = hough_dominant_line(
            canny.edges, decay=cfg.hough_decay, vote_floor=cfg.hough_vote_floor)
    except (FeaturelessImageError, HoughError) as e:
        return 0.0, [f"rotation skipped, treating as axis-aligned: {e}"]
    return rotation_angle_from_line(line), []


def _panel_tta(
    rotated: np.ndarray,
    t: RigidTransform,
    detector: DetectorHandle,
    cfg: PipelineConfig,
    image_id: str,
) -> DetectionSet:
    """Infer on the three flip views of the rotated frame and merge."""
    view_sets = []
    for view_img, view_t in tta_views(rotated):
        found = detect(detector, view_img, image_id)
        dets = list(found.detections)
        if cfg.per_view_nms:
            dets = nms_standard(dets, cfg.per_view_nms_thr)
        view_sets.append(DetectionSet(image_id, view_t, tuple(dets)))
    merged = merge_tta(
        view_sets[0], view_sets[1:], iou_thr=cfg.iou_thr_panel,
        class_aware=cfg.class_aware_merge)
    return DetectionSet(image_id, t, merged.detections)


def run_panel_stage(
    img: np.ndarray, detector: DetectorHandle, cfg: PipelineConfig, image_id: str = ""
) -> tuple[DetectionSet, np.ndarray, RigidTransform, list[str]]:
    """Rotate, infer on the three flip views and merge the panel detections.

    Returns the panels in the rotated frame (their set carries the
    original->rotated transform), the rotated raster and the transform.
    """
    angle, warns = detect_rotation_angle(img, cfg)
    rotated, t = rotate_image(img, angle)
    panels = _panel_tta(rotated, t, detector, cfg, image_id)
    return panels, rotated, t, warns


def run_defect_stage(
    img: np.ndarray,
    rotated: np.ndarray,
    t: RigidTransform,
    detector: DetectorHandle,
    cfg: PipelineConfig,
    image_id: str = "",
) -> DetectionSet:
    """Defect detection; VIS runs on the pre-rotated frame, IR on the original."""
    if cfg.spectrum == "vis":
        found = detect(detector, rotated, image_id)
        return DetectionSet(image_id, t, found.detections)
    found = detect(detector, img, image_id)
    return found  # identity transform: original frame


def _overlap_score(defect: BoundingBox, panel: BoundingBox, mode: str) -> float:
    if mode == "strict-iou":
        return iou(defect, panel)
    if defect.area <= 0.0:
        return 0.0
    return defect.intersection_area(panel) / defect.area


def false_alarm_filter(
    defects: DetectionSet, panels: DetectionSet, cfg: PipelineConfig
) -> DetectionSet:
    """Drop defect proposals that do not sit on any detected panel.

    Defects are expressed in the panel frame, scored against every panel
    and kept when the overlap criterion passes; survivors are returned in
    the original input frame.  The default criterion is intersection over
    defect area (a small defect on a large panel has a symmetric IoU near
    zero, so a literal IoU cut would drop every true defect); boundary
    ratios equal to the threshold are retained.  ``strict-iou`` mode
    applies the symmetric measure with a strict > test instead.
    """
    panel_boxes = [p.box for p in panels.detections]
    into_panel_frame = defects.transform.same_mapping(panels.transform)
    kept = []
    for det in defects.detections:
        box = det.box
        if not into_panel_frame:
            if not defects.transform.is_identity:
                box = transform_box(box, invert(defects.transform))
            box = transform_box(box, panels.transform)
        score = max((_overlap_score(box, p, cfg.filter_mode) for p in panel_boxes), default=0.0)
        passed = score > cfg.iou_thr_defect if cfg.filter_mode == "strict-iou" \
            else score >= cfg.iou_thr_defect
        if passed:
            kept.append(det)

    # anti-transform the survivors into the original input frame
    back = invert(defects.transform)
    original = []
    for det in kept:
        if defects.transform.is_identity:
            original.append(det)
        else:
            original.append(replace(det, box=transform_box(det.box, back)))
    w, h = defects.transform.src_size
    return DetectionSet(defects.image_id, identity_transform(w, h), tuple(original))


# ---------------------------------------------------------------------------
# thermal analysis

def classify_severity(
    delta_t: float,
    breakpoints: tuple[float, float, float] = (10.0, 20.0, 30.0),
) -> tuple[Severity, str]:
    """Severity grade and prescribed action for a temperature gradient."""
    if not math.isfinite(delta_t):
        raise ValueError(f"non-finite temperature gradient {delta_t}")
    if delta_t < 0:
        warnings.warn(f"negative temperature gradient {delta_t:.2f} clamped to 0", stacklevel=2)
        delta_t = 0.0
    if delta_t < breakpoints[0]:
        sev = Severity.NORMAL
    elif delta_t < breakpoints[1]:
        sev = Severity.HEATED_CELLS
    elif delta_t < breakpoints[2]:
        sev = Severity.SEVERE
    else:
        sev = Severity.EXTREMELY_SEVERE
    return sev, SEVERITY_ACTIONS[sev]


def _box_slice(box: BoundingBox, shape) -> tuple[slice, slice]:
    h, w = shape[:2]
    y0 = max(0, int(math.floor(box.y_min)))
    y1 = min(h, int(math.ceil(box.y_max)))
    x0 = max(0, int(math.floor(box.x_min)))
    x1 = min(w, int(math.ceil(box.x_max)))
    return slice(y0, y1), slice(x0, x1)


def hotspot_gradient(
    img: np.ndarray,
    cal: ThermalCalibration,
    hotspot: BoundingBox,
    panel: BoundingBox,
    other_defects=(),
    dilation_px: float = 2.0,
) -> tuple[float, bool]:
    """Peak-over-healthy temperature gradient of one hotspot.

    The healthy reference is the mean temperature of the panel region
    minus every defect box dilated by ``dilation_px``; when that region is
    empty the scene median outside the defect boxes is used instead and a
    warning is emitted.  Returns (delta_t, used_fallback).
    """
    temps = temperature_map(img, cal)
    hs = _box_slice(hotspot, temps.shape)
    if temps[hs].size == 0:
        raise ValueError(f"hotspot box {hotspot} contains no pixels")
    t_defect = float(temps[hs].max())

    all_defects = [hotspot, *other_defects]
    healthy = np.zeros(temps.shape, dtype=bool)
    healthy[_box_slice(panel, temps.shape)] = True
    for d in all_defects:
        grown = BoundingBox(
            d.x_min - dilation_px, d.y_min - dilation_px,
            d.x_max + dilation_px, d.y_max + dilation_px)
        healthy[_box_slice(grown, temps.shape)] = False

    if healthy.any():
        t_healthy = float(temps[healthy].mean())
        return t_defect - t_healthy, False

    outside = np.ones(temps.shape, dtype=bool)
    for d in all_defects:
        outside[_box_slice(d, temps.shape)] = False
    reference = temps[outside] if outside.any() else temps
    warnings.warn(
        "healthy panel region is empty; falling back to the scene median",
        stacklevel=2)
    return t_defect - float(np.median(reference)), True


def soiling_coverage(defect: BoundingBox, panel: BoundingBox) -> float:
    """Fraction of the panel area covered by the defect box."""
    if panel.area <= 0.0:
        raise ValueError(f"panel box {panel} has zero area")
    return defect.intersection_area(panel) / panel.area


# ---------------------------------------------------------------------------
# reports

def _ordered_panels(panels: DetectionSet) -> list[Detection]:
    """Panels in raster order of their top-left corner (1-based indexing)."""
    return sorted(panels.detections, key=lambda d: (d.box.y_min, d.box.x_min))


def render_report_text(report: ImageReport) -> str:
    """The per-image textual report; header line, then one line per finding."""
    lines = [report.image]
    if report.spectrum == "vis":
        for cov in report.coverages:
            lines.append(
                f"Panel {cov.panel_index}: strong soiling covers "
                f"{cov.coverage * 100:.2f} % of the whole area"
            )
    else:
        for i, sev in enumerate(report.severities, start=1):
            lines.append(
                f"Hotspot {i}: dT = {sev.delta_t:.2f} C | severity: "
                f"{sev.severity.label} | action: {sev.action}"
            )
    return "\n".join(lines) + "\n"


def _report_payload(report: ImageReport) -> dict:
    def det_dict(d: Detection) -> dict:
        return {
            "class": d.class_label,
            "confidence": round(d.confidence, 6),
            "box": [round(v, 6) for v in d.box.as_tuple()],
        }

    return {
        "image": report.image,
        "spectrum": report.spectrum,
        "rotation_deg": round(report.rotation_deg, 6),
        "panels": [det_dict(p) for p in _ordered_panels(report.panels)],
        "defects": [det_dict(d) for d in report.defects.detections],
        "severities": [
            {
                **det_dict(s.detection),
                "delta_t": round(s.delta_t, 6),
                "severity": s.severity.name,
                "action": s.action,
                "used_fallback": s.used_fallback,
            }
            for s in report.severities
        ],
        "coverages": [
            {
                "panel_index": c.panel_index,
                "class": c.defect_class,
                "coverage": round(c.coverage, 6),
            }
            for c in report.coverages
        ],
        "warnings": list(report.warnings),
    }


def emit_report(report: ImageReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write the text report and its JSON sidecar; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(report.image).stem or "image"
    text_path = out_dir / f"{stem}_report.txt"
    json_path = out_dir / f"{stem}_report.json"
    text_path.write_text(render_report_text(report))
    json_path.write_text(json.dumps(_report_payload(report), indent=2, sort_keys=True) + "\n")
    return text_path, json_path


# ---------------------------------------------------------------------------
# orchestration

def inspect_image(
    img: np.ndarray,
    panel_detector: DetectorHandle,
    defect_detector: DetectorHandle,
    cfg: PipelineConfig,
    image_id: str = "",
) -> ImageReport:
    """Run the full multi-stage flow on one raster."""
    warns: list[str] = []

    t0 = time.perf_counter()
    angle, rot_warns = detect_rotation_angle(img, cfg)
    warns.extend(rot_warns)
    rotated, t = rotate_image(img, angle)
    t1 = time.perf_counter()

    panels = _panel_tta(rotated, t, panel_detector, cfg, image_id)
    t2 = time.perf_counter()

    defects_raw = run_defect_stage(img, rotated, t, defect_detector, cfg, image_id)
    t3 = time.perf_counter()

    defects = false_alarm_filter(defects_raw, panels, cfg)
    t4 = time.perf_counter()

    report = ImageReport(
        image=image_id,
        spectrum=cfg.spectrum,
        rotation_deg=angle,
        panels=panels,
        defects_raw=defects_raw,
        defects=defects,
        warnings=warns,
        timings=StageTimings(t1 - t0, t2 - t1, t3 - t2, t4 - t3),
    )

    ordered = _ordered_panels(panels)
    panel_boxes_original = [
        p.box if t.is_identity else transform_box(p.box, invert(t)) for p in ordered
    ]

    if cfg.spectrum == "ir" and img.dtype == np.uint16:
        defect_boxes = [d.box for d in defects.detections]
        for det in defects.detections:
            if det.class_label not in cfg.severity_classes:
                continue
            best = None
            for p in panel_boxes_original:
                score = _overlap_score(det.box, p, "intersection-over-defect")
                if best is None or score > best[0]:
                    best = (score, p)
            if best is None or best[0] <= 0.0:
                report.warnings.append(
                    f"defect {det.box.as_tuple()} kept but no overlapping panel found")
                continue
            others = [b for b in defect_boxes if b is not det.box]
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                dt, fallback = hotspot_gradient(
                    img, cfg.calibration, det.box, best[1], others,
                    dilation_px=cfg.defect_dilation_px)
                sev, action = classify_severity(dt, cfg.severity_breakpoints)
            report.warnings.extend(str(w.message) for w in caught)
            report.severities.append(SeverityReport(det, dt, sev, action, fallback))

    if cfg.spectrum == "vis":
        panel_frame_boxes = [p.box for p in ordered]
        for det in defects.detections:
            if det.class_label not in cfg.coverage_classes:
                continue
            box = det.box if t.is_identity else transform_box(det.box, t)
            best_idx, best_score = None, 0.0
            for i, p in enumerate(panel_frame_boxes, start=1):
                score = _overlap_score(box, p, "intersection-over-defect")
                if score > best_score:
                    best_idx, best_score = i, score
            if best_idx is None:
                continue
            cov = soiling_coverage(box, panel_frame_boxes[best_idx - 1])
            report.coverages.append(
                CoverageReport(best_idx, det.class_label, min(1.0, cov)))

    return report
