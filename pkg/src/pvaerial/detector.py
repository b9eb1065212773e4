"""The pluggable detection boundary.

External detectors are separate processes speaking the per-image
detection CSV over the filesystem; the builtin thermal detector is a
deterministic radiometric threshold baseline used to exercise the
pipeline end to end.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BoundingBox, Detection, identity_transform
from .fusion import DetectionSet
from .imaging import ThermalCalibration, temperature_map, write_image
from . import dataset

__all__ = [
    "DetectorError",
    "ExternalDetector",
    "ThermalBaselineDetector",
    "detect",
    "detect_thermal_baseline",
    "parse_detector_spec",
]

CONFIDENCE_SPAN_C = 50.0  # Celsius span that saturates the baseline confidence


class DetectorError(RuntimeError):
    """External detector failed; carries the captured diagnostics."""


TIMEOUT_ENV_VAR = "PVAERIAL_DETECTOR_TIMEOUT"


def _effective_timeout(handle: "ExternalDetector") -> float:
    override = os.environ.get(TIMEOUT_ENV_VAR)
    if override:
        try:
            value = float(override)
        except ValueError as e:
            raise DetectorError(f"bad {TIMEOUT_ENV_VAR} value {override!r}") from e
        if value > 0:
            return value
        raise DetectorError(f"{TIMEOUT_ENV_VAR} must be positive, got {override!r}")
    return handle.timeout_s


@dataclass(frozen=True)
class ExternalDetector:
    """Command-template detector: image path in, detection CSV out."""

    command: str
    workdir: str | None = None
    timeout_s: float = 60.0

    def __post_init__(self):
        if "{input}" not in self.command or "{output}" not in self.command:
            raise ValueError(
                "external command template needs {input} and {output} placeholders")
        if self.timeout_s <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True)
class ThermalBaselineDetector:
    """Threshold detector on the temperature map.

    Pixels warmer than the scene median by ``delta_t_trigger`` are
    segmented into 8-connected blobs; blobs at least ``min_area`` pixels
    large become detections.  Blobs no wider/taller than
    ``junction_max_size`` are labelled "junction", the rest "hotspot".
    The confidence (T_peak - T_median) / 50, clamped to 1, is an artifact
    convention providing an ordering, not a calibrated probability.

    Zero raw readings are treated as invalid (sensor void / rotation
    padding) and excluded from the median.
    """

    calibration: ThermalCalibration
    delta_t_trigger: float = 10.0
    min_area: int = 4
    junction_max_size: float = 4.0

    def __post_init__(self):
        if self.delta_t_trigger <= 0:
            raise ValueError("delta_t_trigger must be positive")
        if self.min_area < 1:
            raise ValueError("min_area must be at least 1")
        if self.junction_max_size <= 0:
            raise ValueError("junction_max_size must be positive")


DetectorHandle = ExternalDetector | ThermalBaselineDetector


def detect_thermal_baseline(
    img: np.ndarray, cal: ThermalCalibration, cfg: ThermalBaselineDetector
) -> list[Detection]:
    """Run the radiometric threshold baseline on a 16-bit frame."""
    temps = temperature_map(img, cal)
    valid = img > 0
    if not valid.any():
        return []
    t_med = float(np.median(temps[valid]))
    mask = valid & (temps > t_med + cfg.delta_t_trigger)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    detections = []
    if n == 0:
        return detections
    objects = ndimage.find_objects(labels)
    for idx, sl in enumerate(objects, start=1):
        blob = labels[sl] == idx
        area = int(blob.sum())
        if area < cfg.min_area:
            continue
        ys, xs = sl
        box = BoundingBox(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop))
        t_peak = float(temps[sl][blob].max())
        confidence = min(1.0, (t_peak - t_med) / CONFIDENCE_SPAN_C)
        w = xs.stop - xs.start
        h = ys.stop - ys.start
        label = "junction" if (w <= cfg.junction_max_size and h <= cfg.junction_max_size) else "hotspot"
        detections.append(Detection(box, label, confidence))
    return detections


def _clip_detections(dets, width: int, height: int) -> list[Detection]:
    clipped = []
    for d in dets:
        box = d.box.clipped(width, height)
        if box.area > 0:
            clipped.append(Detection(box, d.class_label, d.confidence))
    return clipped


def _run_external(handle: ExternalDetector, img: np.ndarray, image_id: str) -> list[Detection]:
    with tempfile.TemporaryDirectory(prefix="pvdetect_", dir=handle.workdir) as tmp:
        suffix = ".tif" if img.dtype == np.uint16 else ".png"
        in_path = Path(tmp) / f"input{suffix}"
        out_path = Path(tmp) / "detections.csv"
        write_image(in_path, img)
        argv = [
            part.format(input=str(in_path), output=str(out_path))
            for part in shlex.split(handle.command)
        ]
        timeout_s = _effective_timeout(handle)
        try:
            proc = subprocess.run(
                argv,
                cwd=handle.workdir,
                capture_output=True,
                text=True,
                timeout=timeout_s,
            )
        except subprocess.TimeoutExpired as e:
            raise DetectorError(
                f"detector timed out after {timeout_s}s on {image_id}: {argv}") from e
        except OSError as e:
            raise DetectorError(f"cannot launch detector {argv}: {e}") from e
        if proc.returncode != 0:
            raise DetectorError(
                f"detector exited {proc.returncode} on {image_id}: {argv}\n"
                f"stdout: {proc.stdout[-2000:]}\nstderr: {proc.stderr[-2000:]}")
        if not out_path.exists():
            return []  # command ran clean but wrote nothing: no detections
        try:
            return dataset.read_detections_csv(out_path)
        except dataset.DetectionCsvError as e:
            raise DetectorError(f"unparseable detector output on {image_id}: {e}") from e


def detect(handle: DetectorHandle, img: np.ndarray, image_id: str = "") -> DetectionSet:
    """Run a detector on one raster; boxes come back clipped to the frame."""
    h, w = img.shape[:2]
    if isinstance(handle, ExternalDetector):
        dets = _run_external(handle, img, image_id)
    elif isinstance(handle, ThermalBaselineDetector):
        dets = detect_thermal_baseline(img, handle.calibration, handle)
    else:
        raise TypeError(f"unknown detector handle {type(handle).__name__}")
    return DetectionSet(image_id, identity_transform(w, h), tuple(_clip_detections(dets, w, h)))


def parse_detector_spec(spec: str, calibration: ThermalCalibration) -> DetectorHandle:
    """Build a handle from a config string.

    ``builtin[:key=value,...]`` configures the thermal baseline
    (trigger, min_area, junction_max_size, and for external use
    ``external:<command template>`` with {input}/{output} placeholders.
    """
    if spec.startswith("external:"):
        return ExternalDetector(command=spec[len("external:"):].strip())
    if spec == "builtin" or spec.startswith("builtin:"):
        kwargs: dict[str, float] = {}
        if ":" in spec:
            for part in spec.split(":", 1)[1].split(","):
                if not part.strip():
                    continue
                key, _, val = part.partition("=")
                key = key.strip()
                if key == "trigger":
                    kwargs["delta_t_trigger"] = float(val)
                elif key == "min_area":
                    kwargs["min_area"] = int(val)
                elif key == "junction_max_size":
                    kwargs["junction_max_size"] = float(val)
                else:
                    raise ValueError(f"unknown builtin detector option {key!r}")
        return ThermalBaselineDetector(calibration=calibration, **kwargs)
    raise ValueError(f"unknown detector spec {spec!r}")
