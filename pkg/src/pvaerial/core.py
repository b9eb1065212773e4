"""Geometry primitives shared by the whole toolkit.

Boxes are axis-aligned with continuous corner coordinates, image-frame
origin at the top-left corner, x to the right and y downwards.  Area uses
the continuous formula (x_max - x_min) * (y_max - y_min), which matches
the corner encoding of the detection CSV format and avoids off-by-one
pixel ambiguity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "BoundingBox",
    "Detection",
    "Annotation",
    "RigidTransform",
    "identity_transform",
    "iou",
    "transform_box",
    "transform_point",
    "invert",
    "rotated_canvas",
]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box; zero-area (degenerate) boxes are legal."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x_min, self.y_min, self.x_max, self.y_max)):
            raise ValueError(f"non-finite box coordinates: {self}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box corners: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def intersection_area(self, other: "BoundingBox") -> float:
        """Area of overlap with another box (0 when disjoint)."""
        iw = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        ih = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if iw <= 0.0 or ih <= 0.0:
            return 0.0
        return iw * ih

    def clipped(self, width: float, height: float) -> "BoundingBox":
        """Clip to the frame [0, width] x [0, height]."""
        x0 = min(max(self.x_min, 0.0), width)
        x1 = min(max(self.x_max, 0.0), width)
        y0 = min(max(self.y_min, 0.0), height)
        y1 = min(max(self.y_max, 0.0), height)
        return BoundingBox(x0, y0, x1, y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    """A detector output: box, class label and confidence score."""

    box: BoundingBox
    class_label: str
    confidence: float

    def __post_init__(self):
        if not self.class_label:
            raise ValueError("empty class label")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Annotation:
    """A ground-truth box with its class label."""

    box: BoundingBox
    class_label: str

    def __post_init__(self):
        if not self.class_label:
            raise ValueError("empty class label")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1].

    Degenerate boxes are handled: a union of zero area gives IoU 0.
    """
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


# Exact cosine/sine for right angles so that right-angle transforms are
# bit-exact on integer coordinates (math.cos(pi/2) is not exactly 0).
_EXACT_CS = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}


def _cos_sin(angle_deg: float) -> tuple[float, float]:
    a = angle_deg % 360.0
    if a in _EXACT_CS:
        return _EXACT_CS[a]
    r = math.radians(a)
    return math.cos(r), math.sin(r)


def rotated_canvas(width: int, height: int, angle_deg: float) -> tuple[int, int]:
    """Destination canvas that contains a width x height frame rotated by angle_deg.

    For non-right angles the expansion keeps the parity of each dimension,
    so the source centre stays on the same pixel-grid phase and round
    trips crop at integer offsets.
    """
    a = angle_deg % 360.0
    if a in (0.0, 180.0):
        return width, height
    if a in (90.0, 270.0):
        return height, width
    c, s = _cos_sin(a)
    w = int(math.ceil(width * abs(c) + height * abs(s) - 1e-9))
    h = int(math.ceil(width * abs(s) + height * abs(c) - 1e-9))
    w += (w - width) % 2
    h += (h - height) % 2
    return w, h


@dataclass(frozen=True)
class RigidTransform:
    """Flip-then-rotate map between two image frames.

    Points are flipped inside the source frame first (x -> W - x and/or
    y -> H - y), then rotated by ``angle_deg`` about the source centre and
    re-centred on the destination canvas.  Positive angles follow the
    convention used by the image rotation kernel: +90 degrees maps pixel
    (x, y) of a WxH frame to (y, W - 1 - x) of the HxW result.
    """

    angle_deg: float
    flip_h: bool
    flip_v: bool
    src_size: tuple[int, int]
    dst_size: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "angle_deg", float(self.angle_deg) % 360.0)
        object.__setattr__(self, "src_size", (int(self.src_size[0]), int(self.src_size[1])))
        expected = rotated_canvas(self.src_size[0], self.src_size[1], self.angle_deg)
        if self.dst_size is None:
            object.__setattr__(self, "dst_size", expected)
            return
        object.__setattr__(self, "dst_size", (int(self.dst_size[0]), int(self.dst_size[1])))
        if self.angle_deg % 90.0 == 0.0 and self.dst_size != expected:
            # Right angles promise exact mapping, so the canvas is pinned.
            # Arbitrary angles may target any canvas (e.g. the inverse of an
            # expanded rotation maps back into the original, smaller frame).
            raise ValueError(
                f"destination size {self.dst_size} inconsistent with rotation by "
                f"{self.angle_deg} deg of a {self.src_size} frame (expected {expected})"
            )
        if self.dst_size[0] < 1 or self.dst_size[1] < 1:
            raise ValueError(f"degenerate destination size {self.dst_size}")

    @property
    def is_identity(self) -> bool:
        return self.angle_deg == 0.0 and not self.flip_h and not self.flip_v

    def same_mapping(self, other: "RigidTransform") -> bool:
        """True when both transforms describe the same frame mapping."""
        return (
            self.angle_deg == other.angle_deg
            and self.flip_h == other.flip_h
            and self.flip_v == other.flip_v
            and tuple(self.src_size) == tuple(other.src_size)
            and tuple(self.dst_size) == tuple(other.dst_size)
        )


def identity_transform(width: int, height: int) -> RigidTransform:
    """Transform that leaves a width x height frame unchanged."""
    return RigidTransform(0.0, False, False, (width, height))


def transform_point(t: RigidTransform, x: float, y: float) -> tuple[float, float]:
    """Map a point through the transform (flips, then rotation)."""
    sw, sh = t.src_size
    dw, dh = t.dst_size
    if t.flip_h:
        x = sw - x
    if t.flip_v:
        y = sh - y
    c, s = _cos_sin(t.angle_deg)
    xc = x - sw / 2.0
    yc = y - sh / 2.0
    xr = c * xc + s * yc
    yr = -s * xc + c * yc
    return xr + dw / 2.0, yr + dh / 2.0


def transform_box(box: BoundingBox, t: RigidTransform) -> BoundingBox:
    """Map a box through the transform and return its axis-aligned hull.

    The hull is clipped to the destination frame.  For right-angle
    rotations and flips the mapping is exact (no hull inflation).
    """
    corners = [
        transform_point(t, box.x_min, box.y_min),
        transform_point(t, box.x_max, box.y_min),
        transform_point(t, box.x_min, box.y_max),
        transform_point(t, box.x_max, box.y_max),
    ]
    xs = [p[0] for p in corners]
    ys = [p[1] for p in corners]
    hull = BoundingBox(min(xs), min(ys), max(xs), max(ys))
    return hull.clipped(t.dst_size[0], t.dst_size[1])


def invert(t: RigidTransform) -> RigidTransform:
    """Inverse transform, expressed in the same flip-then-rotate form.

    Flips and rotations anti-commute (F o R(a) = R(-a) o F): with an even
    number of flips the inverse negates the angle, with an odd number it
    keeps it.  Source and destination frames swap.
    """
    odd = t.flip_h != t.flip_v
    angle = t.angle_deg if odd else (-t.angle_deg) % 360.0
    return RigidTransform(angle, t.flip_h, t.flip_v, tuple(t.dst_size), tuple(t.src_size))
