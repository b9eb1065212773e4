"""Operator-facing command surface.

Subcommands: inspect (full pipeline), rotate, evaluate, anchors, split,
augment.  Settings come from a flat ``key = value`` config file with flag
overrides; flags win.  Exit codes: 0 success, 1 processing error, 2 usage
or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__

IMAGE_SUFFIXES = (".tif", ".tiff", ".png", ".jpg", ".jpeg")


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config file

_CONFIG_KEYS = {
    "spectrum": str,
    "panel_detector": str,
    "defect_detector": str,
    "iou_thr_panel": float,
    "iou_thr_defect": float,
    "filter_mode": str,
    "severity_breakpoints": str,
    "cal_gain": float,
    "cal_offset": float,
    "canny_g_min": float,
    "canny_g_max": float,
    "canny_step": float,
    "canny_n_thr": int,
    "canny_floor": float,
    "hough_decay": float,
    "hough_vote_floor": int,
    "per_view_nms": bool,
    "per_view_nms_thr": float,
    "class_aware_merge": bool,
    "severity_classes": str,
    "coverage_classes": str,
    "defect_dilation_px": float,
    "palette": str,
    "seed": int,
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def load_config_file(path: str | Path) -> dict:
    """Parse the flat key = value config format (# starts a comment)."""
    values: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key: {key}")
        typ = _CONFIG_KEYS[key]
        try:
            values[key] = _parse_bool(val) if typ is bool else typ(val)
        except ValueError as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


def build_pipeline_config(values: dict):
    from .imaging import CannyConfig, ThermalCalibration
    from .pipeline import PipelineConfig

    kwargs = {}
    if "spectrum" in values:
        kwargs["spectrum"] = values["spectrum"]
    for key in ("iou_thr_panel", "iou_thr_defect", "filter_mode", "hough_decay",
                "hough_vote_floor", "per_view_nms", "per_view_nms_thr",
                "class_aware_merge", "defect_dilation_px", "seed"):
        if key in values:
            kwargs[key] = values[key]
    if "severity_breakpoints" in values:
        parts = tuple(float(v) for v in str(values["severity_breakpoints"]).split(","))
        if len(parts) != 3:
            raise ConfigError("severity_breakpoints needs 3 comma-separated values")
        kwargs["severity_breakpoints"] = parts
    for key in ("severity_classes", "coverage_classes"):
        if key in values:
            kwargs[key] = tuple(v.strip() for v in values[key].split(",") if v.strip())
    cal = ThermalCalibration(values.get("cal_gain", 0.04), values.get("cal_offset", -273.15))
    kwargs["calibration"] = cal
    canny_kwargs = {}
    for cfg_key, field_name in (("canny_g_min", "g_min"), ("canny_g_max", "g_max"),
                                ("canny_step", "step"), ("canny_n_thr", "n_thr"),
                                ("canny_floor", "floor")):
        if cfg_key in values:
            canny_kwargs[field_name] = values[cfg_key]
    if canny_kwargs:
        kwargs["canny"] = CannyConfig(**canny_kwargs)
    try:
        return PipelineConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _require(values: dict, key: str):
    if key not in values or values[key] in (None, ""):
        raise ConfigError(f"missing config key: {key}")
    return values[key]


# ---------------------------------------------------------------------------
# shared helpers

def _list_images(directory: str | Path) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _collect_warnings(record) -> list[str]:
    return [str(w.message) for w in record]


# ---------------------------------------------------------------------------
# subcommands

def _draw_box_outline(rgb, box, color, thickness=2):
    h, w = rgb.shape[:2]
    x0 = max(0, int(box.x_min))
    y0 = max(0, int(box.y_min))
    x1 = min(w, int(round(box.x_max)))
    y1 = min(h, int(round(box.y_max)))
    t = thickness
    rgb[y0:y1, x0:min(w, x0 + t)] = color
    rgb[y0:y1, max(0, x1 - t):x1] = color
    rgb[y0:min(h, y0 + t), x0:x1] = color
    rgb[max(0, y1 - t):y1, x0:x1] = color


def _write_previews(report, preview_dir: Path) -> None:
    """False-color rendering of radiometric inputs with detection overlays."""
    import numpy as np

    from .core import invert, transform_box
    from .imaging import false_color, normalize_radiometric, read_image, write_image

    img = read_image(report.image)
    if img.dtype == np.uint16:
        rgb = false_color(normalize_radiometric(img)).copy()
    elif img.ndim == 2:
        rgb = np.stack([img] * 3, axis=-1)
    else:
        rgb = img.copy()
    t = report.panels.transform
    for p in report.panels.detections:
        box = p.box if t.is_identity else transform_box(p.box, invert(t))
        _draw_box_outline(rgb, box, (0, 255, 0))
    for d in report.defects.detections:
        _draw_box_outline(rgb, d.box, (255, 255, 255))
    write_image(preview_dir / f"{Path(report.image).stem}_preview.png", rgb)


def cmd_inspect(args) -> int:
    from . import pipeline as pl
    from .detector import parse_detector_spec
    from .imaging import read_image

    values = load_config_file(args.config) if args.config else {}
    if args.spectrum:
        values["spectrum"] = args.spectrum
    if args.panel_detector:
        values["panel_detector"] = args.panel_detector
    if args.defect_detector:
        values["defect_detector"] = args.defect_detector
    if args.seed is not None:
        values["seed"] = args.seed
    _require(values, "spectrum")
    cfg = build_pipeline_config(values)
    panel_spec = _require(values, "panel_detector")
    defect_spec = _require(values, "defect_detector")
    try:
        panel_detector = parse_detector_spec(panel_spec, cfg.calibration)
        defect_detector = parse_detector_spec(defect_spec, cfg.calibration)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    images = _list_images(args.images)
    if not images:
        raise ConfigError(f"no images found under {args.images}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def process(path: Path):
        img = read_image(path)
        with warnings.catch_warnings(record=True) as rec:
            warnings.simplefilter("always")
            report = pl.inspect_image(img, panel_detector, defect_detector, cfg, str(path))
        report.warnings.extend(_collect_warnings(rec))
        return report

    t_start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        reports = list(pool.map(process, images))
    wall_s = time.perf_counter() - t_start

    from .dataset import write_detections_csv

    manifest_images = []
    n_warnings = 0
    for report in reports:
        text_path, json_path = pl.emit_report(report, out_dir)
        # stem-named CSVs pair directly with the annotations in `evaluate`
        csv_path = out_dir / "detections" / f"{Path(report.image).stem}.csv"
        write_detections_csv(report.defects, csv_path)
        if args.previews:
            _write_previews(report, out_dir / "previews")
        n_warnings += len(report.warnings)
        manifest_images.append({
            "image": report.image,
            "rotation_deg": round(report.rotation_deg, 6),
            "panels": len(report.panels.detections),
            "defects_raw": len(report.defects_raw.detections),
            "defects_kept": len(report.defects.detections),
            "outputs": [str(text_path), str(json_path), str(csv_path)],
            "warnings": report.warnings,
            "timings_s": {
                "rotation": round(report.timings.rotation_s, 6),
                "panel": round(report.timings.panel_s, 6),
                "defect": round(report.timings.defect_s, 6),
                "filter": round(report.timings.filter_s, 6),
                "total": round(report.timings.total_s, 6),
            },
        })

    n = len(reports)
    manifest = {
        "config": {k: str(v) for k, v in sorted(values.items())},
        "spectrum": cfg.spectrum,
        "images": manifest_images,
        "average_timings_s": {
            "rotation": round(sum(r.timings.rotation_s for r in reports) / n, 6),
            "panel": round(sum(r.timings.panel_s for r in reports) / n, 6),
            "defect": round(sum(r.timings.defect_s for r in reports) / n, 6),
            "filter": round(sum(r.timings.filter_s for r in reports) / n, 6),
            "total": round(sum(r.timings.total_s for r in reports) / n, 6),
        },
        "wall_time_s": round(wall_s, 6),
        "jobs": args.jobs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"processed {n} image(s) -> {out_dir} ({n_warnings} warning(s))")
    return 0


def cmd_rotate(args) -> int:
    from . import pipeline as pl
    from .imaging import edge_overlay, read_image, to_grayscale, write_image

    values = load_config_file(args.config) if args.config else {}
    cfg = build_pipeline_config(values)
    images = _list_images(args.images)
    if not images:
        raise ConfigError(f"no images found under {args.images}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    from .imaging import canny_adaptive, rotate_image

    for path in images:
        img = read_image(path)
        angle, warns = pl.detect_rotation_angle(img, cfg)
        rotated, t = rotate_image(img, angle)
        for w in warns:
            print(f"warning: {path.name}: {w}", file=sys.stderr)
        write_image(out_dir / f"{path.stem}_rotated{path.suffix}", rotated)
        sidecar = {
            "image": str(path),
            "angle_deg": round(angle, 6),
            "flip_h": t.flip_h,
            "flip_v": t.flip_v,
            "src_size": list(t.src_size),
            "dst_size": list(t.dst_size),
        }
        (out_dir / f"{path.stem}_transform.json").write_text(
            json.dumps(sidecar, indent=2) + "\n")
        if args.debug_edges:
            try:
                canny = canny_adaptive(to_grayscale(img), cfg.canny)
                write_image(out_dir / f"{path.stem}_edges.png",
                            edge_overlay(to_grayscale(img), canny.edges))
            except Exception as e:  # debug output only
                print(f"warning: {path.name}: no edge overlay: {e}", file=sys.stderr)
    print(f"rotated {len(images)} image(s) -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_run, format_metrics_table, write_metrics_csv

    try:
        thresholds = tuple(float(v) for v in args.iou.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --iou list {args.iou!r}: {e}") from e
    result = evaluate_run(args.detections, args.annotations, thresholds,
                          classes=args.classes.split(",") if args.classes else None)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result, out_dir / "metrics.csv")
    table = format_metrics_table(result)
    (out_dir / "metrics.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_anchors(args) -> int:
    import csv as _csv

    from .anchors import BoxShape, partition_anchors_by_scale, select_k
    from .dataset import load_annotations

    xml_files = sorted(Path(args.annotations).glob("*.xml"))
    if not xml_files:
        raise ConfigError(f"no XML annotations under {args.annotations}")
    shapes = []
    for xml in xml_files:
        sample = load_annotations(xml)
        shapes.extend(
            BoxShape(a.box.width, a.box.height)
            for a in sample.annotations if a.box.area > 0)
    if not shapes:
        raise ConfigError("annotations contain no boxes")

    lo, _, hi = args.k_range.partition(":")
    try:
        k_range = range(int(lo), int(hi) + 1)
    except ValueError as e:
        raise ConfigError(f"bad --k-range {args.k_range!r} (expected lo:hi)") from e
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        best_k, diagnostics = select_k(shapes, k_range, seed=args.seed)
    for w in rec:
        print(f"warning: {w.message}", file=sys.stderr)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "diagnostics.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["k", "mean_iou", "sse", "silhouette"])
        for d in diagnostics:
            writer.writerow([d.k, f"{d.mean_iou:.6f}", f"{d.sse:.6f}",
                             f"{d.mean_silhouette:.6f}"])
    chosen = next(d for d in diagnostics if d.k == best_k)
    anchors_sorted = sorted(chosen.centroids, key=lambda c: (c.area, c.width))
    with open(out_dir / "anchors.txt", "w") as fh:
        for c in anchors_sorted:
            fh.write(f"{c.width:.2f},{c.height:.2f}\n")
    if best_k % 3 == 0:
        fine, mid, coarse = partition_anchors_by_scale(chosen.centroids)
        scales = {
            "fine": [[c.width, c.height] for c in fine],
            "medium": [[c.width, c.height] for c in mid],
            "coarse": [[c.width, c.height] for c in coarse],
        }
        (out_dir / "scales.json").write_text(json.dumps(scales, indent=2) + "\n")
    print(f"selected k={best_k}; outputs in {out_dir}")
    return 0


def cmd_split(args) -> int:
    from .dataset import load_annotations, stratified_split

    xml_files = sorted(Path(args.annotations).glob("*.xml"))
    if not xml_files:
        raise ConfigError(f"no XML annotations under {args.annotations}")
    samples = [load_annotations(p) for p in xml_files]
    ratios = tuple(float(v) for v in args.ratios.split(","))
    if len(ratios) != 3:
        raise ConfigError("ratios must be three comma-separated values")
    split = stratified_split(samples, ratios, seed=args.seed, strict=args.strict)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "validation", "test"), split.parts):
        (out_dir / f"{name}.txt").write_text(
            "".join(f"{img.image_path}\n" for img in part))
    for c, fracs in sorted(split.class_fractions.items()):
        print(f"{c}: train {fracs[0] * 100:.2f}% / val {fracs[1] * 100:.2f}% "
              f"/ test {fracs[2] * 100:.2f}%")
    print(f"split {len(samples)} images "
          f"{[len(p) for p in split.parts]} -> {out_dir}")
    return 0


def cmd_augment(args) -> int:
    from .dataset import AugmentationSpec, augment, load_annotations, write_annotations
    from .imaging import read_image, write_image

    xml_files = sorted(Path(args.annotations).glob("*.xml"))
    if not xml_files:
        raise ConfigError(f"no XML annotations under {args.annotations}")
    detector, _, spectrum = args.profile.partition("-")
    try:
        base_spec = AugmentationSpec.for_detector(detector, spectrum or "ir", seed=args.seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = 0
    for i, xml in enumerate(xml_files):
        sample = load_annotations(xml)
        image = None
        if args.images:
            img_path = Path(args.images) / Path(sample.image_path).name
            if img_path.exists():
                image = read_image(img_path)
        spec = replace(base_spec, seed=args.seed + i)
        for variant, raster, suffix in augment(sample, spec, image):
            stem = f"{xml.stem}_{suffix}"
            named = replace(variant, image_path=f"{stem}.png")
            write_annotations(named, out_dir / f"{stem}.xml")
            if raster is not None:
                write_image(out_dir / f"{stem}.png", raster)
            produced += 1
    print(f"wrote {produced} augmented sample(s) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvaerial",
        description="Batch post-processing for UAV imagery of PV plants.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="run the full multi-stage pipeline")
    p.add_argument("--spectrum", choices=("ir", "vis"))
    p.add_argument("--images", required=True)
    p.add_argument("--panel-detector")
    p.add_argument("--defect-detector")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--previews", action="store_true",
                   help="write false-color previews with detection overlays")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("rotate", help="align panels to the image axes")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--debug-edges", action="store_true")
    p.set_defaults(func=cmd_rotate)

    p = sub.add_parser("evaluate", help="VOC metrics for a detection run")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--iou", default="0.3,0.4,0.5,0.7")
    p.add_argument("--classes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("anchors", help="anchor clustering diagnostics")
    p.add_argument("--annotations", required=True)
    p.add_argument("--k-range", default="1:12")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("split", help="stratified train/val/test split")
    p.add_argument("--annotations", required=True)
    p.add_argument("--ratios", default="0.7,0.15,0.15")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="box-aware geometric augmentation")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images")
    p.add_argument("--profile", default="defect-ir",
                   choices=("defect-ir", "defect-vis", "panel", "panel-ir", "panel-vis"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # processing failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
