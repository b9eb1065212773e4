"""Ingestion and emission of the data artifacts.

PASCAL-VOC XML annotations (read/write), per-image detection CSVs
(class,confidence,x_min,y_min,x_max,y_max with 6 decimals, no header),
stratified dataset splits and box-aware geometric augmentation.
"""

from __future__ import annotations

import csv
import random
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Annotation, BoundingBox, Detection, RigidTransform, transform_box

__all__ = [
    "AnnotationFormatError",
    "DetectionCsvError",
    "AnnotatedImage",
    "DatasetSplit",
    "AugmentationSpec",
    "load_annotations",
    "write_annotations",
    "read_detections_csv",
    "write_detections_csv",
    "stratified_split",
    "augment",
]


class AnnotationFormatError(ValueError):
    """A VOC XML file does not parse or violates box invariants."""


class DetectionCsvError(ValueError):
    """A detection CSV row is malformed."""


@dataclass(frozen=True)
class AnnotatedImage:
    """An image reference with its ground-truth boxes."""

    image_path: str
    width: int
    height: int
    annotations: tuple[Annotation, ...]

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bad image dimensions {self.width}x{self.height}")

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for a in self.annotations:
            counts[a.class_label] = counts.get(a.class_label, 0) + 1
        return counts


# ---------------------------------------------------------------------------
# VOC XML

def load_annotations(xml_path: str | Path) -> AnnotatedImage:
    """Parse a PASCAL-VOC XML file; boxes are clipped to the image frame."""
    xml_path = Path(xml_path)
    try:
        tree = ET.parse(xml_path)
    except ET.ParseError as e:
        raise AnnotationFormatError(f"{xml_path}: {e}") from e
    root = tree.getroot()

    def req(parent, tag, ctx):
        node = parent.find(tag)
        if node is None or node.text is None:
            raise AnnotationFormatError(f"{xml_path}: missing <{tag}> in {ctx}")
        return node.text.strip()

    size = root.find("size")
    if size is None:
        raise AnnotationFormatError(f"{xml_path}: missing <size>")
    width = int(float(req(size, "width", "size")))
    height = int(float(req(size, "height", "size")))

    path_node = root.find("path")
    name_node = root.find("filename")
    image_path = (path_node.text.strip() if path_node is not None and path_node.text
                  else name_node.text.strip() if name_node is not None and name_node.text
                  else xml_path.stem)

    annotations = []
    for i, obj in enumerate(root.iter("object")):
        ctx = f"object #{i}"
        name = req(obj, "name", ctx)
        bnd = obj.find("bndbox")
        if bnd is None:
            raise AnnotationFormatError(f"{xml_path}: missing <bndbox> in {ctx}")
        try:
            x0 = float(req(bnd, "xmin", ctx))
            y0 = float(req(bnd, "ymin", ctx))
            x1 = float(req(bnd, "xmax", ctx))
            y1 = float(req(bnd, "ymax", ctx))
        except ValueError as e:
            raise AnnotationFormatError(f"{xml_path}: bad coordinate in {ctx}: {e}") from e
        if x1 <= x0 or y1 <= y0:
            raise AnnotationFormatError(
                f"{xml_path}: inverted or empty box ({x0},{y0},{x1},{y1}) in {ctx}")
        box = BoundingBox(x0, y0, x1, y1).clipped(width, height)
        if box.x_max <= box.x_min or box.y_max <= box.y_min:
            raise AnnotationFormatError(
                f"{xml_path}: box ({x0},{y0},{x1},{y1}) in {ctx} is empty after clipping")
        annotations.append(Annotation(box, name))

    return AnnotatedImage(image_path, width, height, tuple(annotations))


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_annotations(sample: AnnotatedImage, xml_path: str | Path) -> None:
    """Write an AnnotatedImage as PASCAL-VOC XML (coordinates at 6 decimals)."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = Path(sample.image_path).name
    ET.SubElement(root, "path").text = str(sample.image_path)
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(sample.width)
    ET.SubElement(size, "height").text = str(sample.height)
    ET.SubElement(size, "depth").text = "3"
    for a in sample.annotations:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = a.class_label
        bnd = ET.SubElement(obj, "bndbox")
        ET.SubElement(bnd, "xmin").text = _fmt(a.box.x_min)
        ET.SubElement(bnd, "ymin").text = _fmt(a.box.y_min)
        ET.SubElement(bnd, "xmax").text = _fmt(a.box.x_max)
        ET.SubElement(bnd, "ymax").text = _fmt(a.box.y_max)
    tree = ET.ElementTree(root)
    ET.indent(tree)
    xml_path = Path(xml_path)
    xml_path.parent.mkdir(parents=True, exist_ok=True)
    tree.write(xml_path, encoding="unicode")


# ---------------------------------------------------------------------------
# detection CSV

def write_detections_csv(dets, path: str | Path) -> None:
    """Write detections as class,confidence,x_min,y_min,x_max,y_max rows.

    No header, '.' decimal separator, 6 decimals; accepts a DetectionSet
    or any iterable of Detection.
    """
    detections = getattr(dets, "detections", dets)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for d in detections:
            fh.write(
                f"{d.class_label},{_fmt(d.confidence)},{_fmt(d.box.x_min)},"
                f"{_fmt(d.box.y_min)},{_fmt(d.box.x_max)},{_fmt(d.box.y_max)}\n"
            )


def read_detections_csv(path: str | Path) -> list[Detection]:
    """Read a detection CSV written by write_detections_csv."""
    detections = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 6:
                raise DetectionCsvError(
                    f"{path}:{lineno}: expected 6 fields, got {len(row)}")
            label = row[0]
            try:
                conf, x0, y0, x1, y1 = (float(v) for v in row[1:])
            except ValueError as e:
                raise DetectionCsvError(f"{path}:{lineno}: {e}") from e
            if not (0.0 <= conf <= 1.0):
                raise DetectionCsvError(
                    f"{path}:{lineno}: confidence {conf} outside [0, 1]")
            try:
                det = Detection(BoundingBox(x0, y0, x1, y1), label, conf)
            except ValueError as e:
                raise DetectionCsvError(f"{path}:{lineno}: {e}") from e
            detections.append(det)
    return detections


# ---------------------------------------------------------------------------
# stratified split

@dataclass(frozen=True)
class DatasetSplit:
    """Image-level train/validation/test partition with achieved fractions."""

    train: tuple[AnnotatedImage, ...]
    validation: tuple[AnnotatedImage, ...]
    test: tuple[AnnotatedImage, ...]
    ratios: tuple[float, float, float]
    class_fractions: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    @property
    def parts(self) -> tuple[tuple[AnnotatedImage, ...], ...]:
        return (self.train, self.validation, self.test)


def stratified_split(
    images,
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
    strict: bool = False,
) -> DatasetSplit:
    """Greedy image-level stratified split.

    Images are placed largest-first (by instance count); each goes to the
    split that minimizes the squared deviation of per-class instance
    fractions (and image fractions) from the target ratios.  Deterministic
    for a fixed seed, which only shuffles the ordering of equal-sized
    images.
    """
    images = list(images)
    if not images:
        raise ValueError("no images to split")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios {ratios} do not sum to 1")
    if any(r < 0 for r in ratios):
        raise ValueError(f"negative ratio in {ratios}")

    classes = sorted({a.class_label for img in images for a in img.annotations})
    totals = {c: 0 for c in classes}
    images_per_class = {c: 0 for c in classes}
    for img in images:
        counts = img.class_counts()
        for c, n in counts.items():
            totals[c] += n
            images_per_class[c] += 1
    if strict:
        thin = [c for c, n in images_per_class.items() if n < 3]
        if thin:
            raise ValueError(f"classes with fewer than 3 images: {thin}")

    rng = random.Random(seed)
    order = list(range(len(images)))
    rng.shuffle(order)
    # stable sort by decreasing instance count over the shuffled order
    order.sort(key=lambda i: -len(images[i].annotations))

    assigned = [{c: 0 for c in classes} for _ in range(3)]
    image_counts = [0, 0, 0]
    buckets: tuple[list[AnnotatedImage], ...] = ([], [], [])

    def deviation_delta(split_idx: int, counts: dict[str, int]) -> float:
        """Change in total squared fraction deviation if placed here."""
        target = ratios[split_idx]
        delta = 0.0
        for c, n in counts.items():
            if totals[c] == 0:
                continue
            before = assigned[split_idx][c] / totals[c] - target
            after = (assigned[split_idx][c] + n) / totals[c] - target
            delta += after ** 2 - before ** 2
        # tie-break pressure from the image-count balance
        before_img = image_counts[split_idx] / len(images) - target
        after_img = (image_counts[split_idx] + 1) / len(images) - target
        delta += 1e-6 * (after_img ** 2 - before_img ** 2)
        return delta

    for i in order:
        img = images[i]
        counts = img.class_counts()
        best = min(range(3), key=lambda s: (deviation_delta(s, counts), s))
        buckets[best].append(img)
        image_counts[best] += 1
        for c, n in counts.items():
            assigned[best][c] += n

    fractions = {
        c: tuple(assigned[s][c] / totals[c] if totals[c] else 0.0 for s in range(3))
        for c in classes
    }
    return DatasetSplit(
        train=tuple(buckets[0]),
        validation=tuple(buckets[1]),
        test=tuple(buckets[2]),
        ratios=tuple(ratios),
        class_fractions=fractions,
    )


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationSpec:
    """Which geometric transforms an augmentation pass applies.

    Profiles mirror the published menu: the defect detector on thermal
    imagery uses all five transforms, the visible-spectrum defect profile
    drops rotation (inputs are pre-rotated), and the panel profile keeps
    only the two flips.
    """

    rotation: bool = False
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    horizontal_flip: bool = False
    vertical_flip: bool = False
    cropping: bool = False
    crop_range: tuple[float, float] = (0.60, 0.90)
    scaling: bool = False
    scale_range: tuple[float, float] = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        if self.rotation and self.rotation_range[0] >= self.rotation_range[1]:
            raise ValueError(f"empty rotation range {self.rotation_range}")
        if self.cropping and not (0 < self.crop_range[0] <= self.crop_range[1] <= 1):
            raise ValueError(f"bad crop range {self.crop_range}")
        if self.scaling and (self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]):
            raise ValueError(f"bad scale range {self.scale_range}")

    @classmethod
    def for_detector(cls, detector: str, spectrum: str, seed: int = 0) -> "AugmentationSpec":
        """Profile for a detector ('panel' or 'defect') and spectrum ('ir' or 'vis')."""
        if detector == "panel":
            return cls(horizontal_flip=True, vertical_flip=True, seed=seed)
        if detector == "defect":
            return cls(
                rotation=(spectrum == "ir"),
                horizontal_flip=True,
                vertical_flip=True,
                cropping=True,
                scaling=True,
                seed=seed,
            )
        raise ValueError(f"unknown detector profile {detector!r}")


def _flip_sample(sample: AnnotatedImage, image, horizontal: bool):
    w, h = sample.width, sample.height
    t = RigidTransform(0.0, horizontal, not horizontal, (w, h))
    boxes = tuple(
        Annotation(transform_box(a.box, t), a.class_label) for a in sample.annotations
    )
    suffix = "hflip" if horizontal else "vflip"
    out_img = None
    if image is not None:
        out_img = np.flip(image, axis=1 if horizontal else 0).copy()
    return replace(sample, annotations=boxes), out_img, suffix


def _rotate_sample(sample: AnnotatedImage, image, angle: float):
    w, h = sample.width, sample.height
    t = RigidTransform(angle, False, False, (w, h))
    dw, dh = t.dst_size
    boxes = []
    for a in sample.annotations:
        b = transform_box(a.box, t)
        if b.area > 0:
            boxes.append(Annotation(b, a.class_label))
    out_img = None
    if image is not None:
        from .imaging import rotate_image

        out_img, _ = rotate_image(image, angle)
    rotated = AnnotatedImage(sample.image_path, dw, dh, tuple(boxes))
    return rotated, out_img, f"rot{angle:+.1f}"


def _scale_sample(sample: AnnotatedImage, image, factor: float):
    w2 = max(1, int(round(sample.width * factor)))
    h2 = max(1, int(round(sample.height * factor)))
    sx = w2 / sample.width
    sy = h2 / sample.height
    boxes = tuple(
        Annotation(
            BoundingBox(a.box.x_min * sx, a.box.y_min * sy, a.box.x_max * sx, a.box.y_max * sy),
            a.class_label,
        )
        for a in sample.annotations
    )
    out_img = None
    if image is not None:
        from scipy import ndimage as ndi

        zoom = (h2 / image.shape[0], w2 / image.shape[1])
        if image.ndim == 3:
            zoom = zoom + (1.0,)
        out_img = ndi.zoom(image, zoom, order=1, grid_mode=True, mode="nearest")
    scaled = AnnotatedImage(sample.image_path, w2, h2, boxes)
    return scaled, out_img, f"scale{factor:.2f}"


def _crop_sample(sample: AnnotatedImage, image, rng: random.Random, crop_range, tries: int = 10):
    w, h = sample.width, sample.height
    for _ in range(tries):
        cw = int(round(w * rng.uniform(*crop_range)))
        ch = int(round(h * rng.uniform(*crop_range)))
        cw, ch = max(1, cw), max(1, ch)
        x0 = rng.randint(0, w - cw)
        y0 = rng.randint(0, h - ch)
        boxes = []
        for a in sample.annotations:
            b = BoundingBox(
                a.box.x_min - x0, a.box.y_min - y0, a.box.x_max - x0, a.box.y_max - y0
            ).clipped(cw, ch)
            if b.area > 0:
                boxes.append(Annotation(b, a.class_label))
        if boxes:
            out_img = image[y0:y0 + ch, x0:x0 + cw].copy() if image is not None else None
            cropped = AnnotatedImage(sample.image_path, cw, ch, tuple(boxes))
            return cropped, out_img, f"crop{x0}_{y0}_{cw}x{ch}"
    return None


def augment(sample: AnnotatedImage, spec: AugmentationSpec, image: np.ndarray | None = None):
    """Apply every enabled transform once; one output per transform.

    Returns a list of (AnnotatedImage, raster-or-None, name-suffix)
    triples.  Crops that would drop every annotation are resampled up to
    10 times and skipped if still empty.
    """
    if image is not None and (image.shape[0] != sample.height or image.shape[1] != sample.width):
        raise ValueError(
            f"raster {image.shape} does not match annotated size "
            f"{sample.width}x{sample.height}")
    rng = random.Random(spec.seed)
    out = []
    if spec.rotation:
        angle = rng.uniform(*spec.rotation_range)
        out.append(_rotate_sample(sample, image, angle))
    if spec.horizontal_flip:
        out.append(_flip_sample(sample, image, horizontal=True))
    if spec.vertical_flip:
        out.append(_flip_sample(sample, image, horizontal=False))
    if spec.cropping:
        cropped = _crop_sample(sample, image, rng, spec.crop_range)
        if cropped is not None:
            out.append(cropped)
    if spec.scaling:
        factor = rng.uniform(*spec.scale_range)
        out.append(_scale_sample(sample, image, factor))
    return out
