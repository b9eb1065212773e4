"""Raster kernels for the preprocessing chain.

Rasters are plain numpy arrays: 16-bit radiometric frames are ``uint16``
(H, W), 8-bit grayscale ``uint8`` (H, W), RGB ``uint8`` (H, W, 3).  Edge
maps are boolean (H, W) arrays.  All kernels are pure functions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import RigidTransform

__all__ = [
    "FeaturelessImageError",
    "HoughError",
    "ThermalCalibration",
    "CannyConfig",
    "CannyResult",
    "HoughLine",
    "read_image",
    "write_image",
    "to_grayscale",
    "normalize_radiometric",
    "rainbow_palette",
    "load_palette",
    "write_palette",
    "false_color",
    "edge_overlay",
    "temperature_of",
    "temperature_map",
    "gaussian_5x5",
    "sobel_gradient",
    "canny_adaptive",
    "elbow_n_thr",
    "hough_dominant_line",
    "rotation_angle_from_line",
    "rotate_image",
]


class FeaturelessImageError(RuntimeError):
    """Adaptive Canny hit its threshold floor without enough edge pixels."""


class HoughError(RuntimeError):
    """No dominant line can be extracted from the edge map."""


# ---------------------------------------------------------------------------
# image I/O

def read_image(path: str | Path) -> np.ndarray:
    """Load a raster: 16-bit TIFF -> uint16, 8-bit gray -> uint8, RGB -> uint8 HxWx3."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L"):
            return np.asarray(im, dtype=np.uint16)
        if im.mode == "I":
            arr = np.asarray(im, dtype=np.int32)
            return np.clip(arr, 0, 65535).astype(np.uint16)
        if im.mode == "L":
            return np.asarray(im, dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a raster; uint16 goes to TIFF, uint8 to whatever the suffix says."""
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """8-bit grayscale view of any supported raster."""
    if img.ndim == 3:
        # ITU-R 601 luma, rounded half-up
        f = img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
        return np.floor(f + 0.5).astype(np.uint8)
    if img.dtype == np.uint16:
        return normalize_radiometric(img)
    return img.astype(np.uint8, copy=False)


# ---------------------------------------------------------------------------
# radiometric normalization and false color

def normalize_radiometric(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize raw 16-bit readings to 8-bit gray.

    A constant frame maps to all zeros (uniform scene convention).
    """
    if raw.size == 0:
        raise ValueError("empty raster")
    lo = int(raw.min())
    hi = int(raw.max())
    if hi == lo:
        return np.zeros(raw.shape, dtype=np.uint8)
    scaled = (raw.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return np.floor(scaled + 0.5).astype(np.uint8)


_PALETTE_RESOURCE = "rainbow_palette.csv"


def _build_rainbow() -> np.ndarray:
    """256-entry blue->cyan->green->yellow->red ramp, all entries distinct."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    i = np.arange(64)
    pal[0:64] = np.stack([np.zeros(64), 4 * i, np.full(64, 255)], axis=1)
    pal[64:128] = np.stack([np.zeros(64), np.full(64, 255), 255 - 4 * i], axis=1)
    pal[128:192] = np.stack([4 * i, np.full(64, 255), np.zeros(64)], axis=1)
    pal[192:256] = np.stack([np.full(64, 255), 252 - 4 * i, np.zeros(64)], axis=1)
    return pal


def write_palette(path: str | Path, palette: np.ndarray | None = None) -> None:
    """Write a 256x3 palette as CSV rows r,g,b."""
    palette = _build_rainbow() if palette is None else palette
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for r, g, b in palette:
            writer.writerow([int(r), int(g), int(b)])


def load_palette(path: str | Path) -> np.ndarray:
    """Load a 256x3 uint8 palette from a CSV of r,g,b rows."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            rows.append([int(v) for v in row])
    pal = np.asarray(rows, dtype=np.int64)
    if pal.shape != (256, 3) or pal.min() < 0 or pal.max() > 255:
        raise ValueError(f"palette at {path} is not a 256x3 table of bytes")
    return pal.astype(np.uint8)


@lru_cache(maxsize=1)
def rainbow_palette() -> np.ndarray:
    """The palette shipped with the package (bit-reproducible outputs)."""
    ref = resources.files(__package__).joinpath("data", _PALETTE_RESOURCE)
    with resources.as_file(ref) as path:
        return load_palette(path)


def false_color(gray: np.ndarray, palette: np.ndarray | None = None) -> np.ndarray:
    """Map 8-bit gray to RGB through the rainbow lookup table."""
    if palette is None:
        palette = rainbow_palette()
    return palette[gray.astype(np.uint8)]


def edge_overlay(gray: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Debug rendering: grayscale image with edge pixels painted red."""
    rgb = np.stack([gray, gray, gray], axis=-1).astype(np.uint8)
    rgb[edges] = (255, 0, 0)
    return rgb


# ---------------------------------------------------------------------------
# temperature retrieval (affine calibration)

@dataclass(frozen=True)
class ThermalCalibration:
    """Affine raw->Celsius calibration: T = gain * raw + offset."""

    gain: float
    offset: float

    def __post_init__(self):
        if not (math.isfinite(self.gain) and math.isfinite(self.offset)):
            raise ValueError("non-finite calibration")
        if self.gain <= 0:
            raise ValueError(f"calibration gain must be positive, got {self.gain}")


def temperature_of(raw_value: float, cal: ThermalCalibration) -> float:
    """Celsius temperature of a single raw sensor reading."""
    return cal.gain * raw_value + cal.offset


def temperature_map(raw: np.ndarray, cal: ThermalCalibration) -> np.ndarray:
    """Celsius temperature image of a raw radiometric frame."""
    return raw.astype(np.float64) * cal.gain + cal.offset


# ---------------------------------------------------------------------------
# smoothing and gradients

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _separable5(img: np.ndarray) -> np.ndarray:
    """5-tap binomial smoothing along both axes, edge-replicated border."""
    padded = np.pad(img, 2, mode="edge").astype(np.float64)
    tmp = np.zeros((padded.shape[0], img.shape[1]), dtype=np.float64)
    for k, w in enumerate(_BINOMIAL5):
        tmp += w * padded[:, k:k + img.shape[1]]
    out = np.zeros(img.shape, dtype=np.float64)
    for k, w in enumerate(_BINOMIAL5):
        out += w * tmp[k:k + img.shape[0], :]
    return out


def gaussian_5x5(img: np.ndarray) -> np.ndarray:
    """5x5 binomial Gaussian smoothing; integer inputs come back rounded."""
    if img.shape[0] < 5 or img.shape[1] < 5:
        raise ValueError(f"image {img.shape} smaller than the 5x5 kernel")
    out = _separable5(img)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        return np.clip(np.floor(out + 0.5), info.min, info.max).astype(img.dtype)
    return out.astype(img.dtype, copy=False)


def sobel_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient magnitude and direction with the 3x3 Sobel stencils.

    Returns (G, alpha) where G = sqrt(Gx^2 + Gy^2) and alpha is the
    atan2(Gy, Gx) direction quantized to {0, 45, 90, 135} degrees for the
    thinning step.
    """
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"image {img.shape} smaller than the 3x3 stencil")
    f = img.astype(np.float64)
    p = np.pad(f, 1, mode="edge")
    h, w = img.shape
    # separable Sobel: smooth (1,2,1) on one axis, difference (-1,0,1) on the other
    sm_x = p[:, 0:w] + 2.0 * p[:, 1:w + 1] + p[:, 2:w + 2]
    gy = sm_x[2:h + 2, :] - sm_x[0:h, :]
    sm_y = p[0:h, :] + 2.0 * p[1:h + 1, :] + p[2:h + 2, :]
    gx = sm_y[:, 2:w + 2] - sm_y[:, 0:w]
    g = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    alpha = np.zeros(img.shape, dtype=np.uint8)
    alpha[(ang >= 22.5) & (ang < 67.5)] = 45
    alpha[(ang >= 67.5) & (ang < 112.5)] = 90
    alpha[(ang >= 112.5) & (ang < 157.5)] = 135
    return g, alpha


def _directional_nms(g: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Thin the gradient ridge: keep pixels that are maxima along alpha."""
    p = np.pad(g, 1, mode="constant")
    h, w = g.shape

    def shifted(dy: int, dx: int) -> np.ndarray:
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    out = np.zeros_like(g)
    for code, (dy, dx) in {0: (0, 1), 45: (1, 1), 90: (1, 0), 135: (-1, 1)}.items():
        sel = alpha == code
        keep = sel & (g >= shifted(dy, dx)) & (g >= shifted(-dy, -dx))
        out[keep] = g[keep]
    return out


# ---------------------------------------------------------------------------
# adaptive Canny

@dataclass(frozen=True)
class CannyConfig:
    """Hysteresis thresholds and the adaptive relaxation schedule."""

    g_min: float = 450.0
    g_max: float = 550.0
    step: float = 50.0
    n_thr: int = 1000
    floor: float = 50.0

    def __post_init__(self):
        if not (0 < self.g_min < self.g_max):
            raise ValueError(f"need 0 < g_min < g_max, got {self.g_min}, {self.g_max}")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.n_thr < 1:
            raise ValueError("n_thr must be at least 1")
        if self.floor <= 0 or self.floor > self.g_min:
            raise ValueError("floor must be in (0, g_min]")


@dataclass(frozen=True)
class CannyResult:
    """Edge map plus the hysteresis thresholds that produced it."""

    edges: np.ndarray
    g_min: float
    g_max: float
    iterations: int
    n_edges: int


_CONN8 = np.ones((3, 3), dtype=bool)


def _hysteresis(g_thin: np.ndarray, g_min: float, g_max: float) -> np.ndarray:
    """Double-threshold tracking: weak pixels survive only when 8-connected
    to a strong one."""
    strong = g_thin > g_max
    candidates = g_thin >= g_min
    if not strong.any():
        return np.zeros(g_thin.shape, dtype=bool)
    labels, n = ndimage.label(candidates, structure=_CONN8)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_adaptive(img: np.ndarray, cfg: CannyConfig = CannyConfig()) -> CannyResult:
    """Canny with the threshold relaxation loop.

    Runs smooth -> gradient -> directional thinning -> hysteresis, counts
    edge pixels and, while the count stays below ``cfg.n_thr``, lowers both
    thresholds by ``cfg.step`` and redoes the hysteresis.  Raises
    FeaturelessImageError when the floor is reached with too few edges.
    """
    if img.shape[0] < 5 or img.shape[1] < 5:
        raise ValueError(f"image {img.shape} smaller than the 5x5 kernel")
    smooth = _separable5(img)
    g, alpha = sobel_gradient(smooth)
    g_thin = _directional_nms(g, alpha)

    g_min, g_max = cfg.g_min, cfg.g_max
    iterations = 0
    while True:
        iterations += 1
        edges = _hysteresis(g_thin, g_min, g_max)
        n_edges = int(edges.sum())
        if n_edges >= cfg.n_thr:
            return CannyResult(edges, g_min, g_max, iterations, n_edges)
        if g_min <= cfg.floor:
            raise FeaturelessImageError(
                f"only {n_edges} edge pixels at the threshold floor "
                f"({g_min}/{g_max}); image is featureless"
            )
        g_min -= cfg.step
        g_max -= cfg.step


def elbow_n_thr(edge_counts) -> int:
    """Elbow of a sorted increasing count curve.

    Returns the count at the interior point farthest (perpendicular
    distance) from the chord joining the first and last points; ties break
    towards the lowest index.
    """
    counts = [float(v) for v in edge_counts]
    n = len(counts)
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    if any(b < a for a, b in zip(counts, counts[1:])):
        raise ValueError("edge counts must be sorted increasing")
    idx = _elbow_index(list(range(n)), counts)
    return int(edge_counts[idx])


def _elbow_index(xs, ys) -> int:
    """Index of the interior point with maximum distance from the chord."""
    x0, y0 = float(xs[0]), float(ys[0])
    dx = float(xs[-1]) - x0
    dy = float(ys[-1]) - y0
    best, best_d = 1, -1.0
    for i in range(1, len(xs) - 1):
        d = abs(dx * (ys[i] - y0) - dy * (xs[i] - x0))
        if d > best_d + 1e-12:
            best, best_d = i, d
    return best


# ---------------------------------------------------------------------------
# Hough line extraction

@dataclass(frozen=True)
class HoughLine:
    """Line in normal form: rho = x*cos(theta) + y*sin(theta), theta in [0, pi)."""

    rho: float
    theta: float

    def __post_init__(self):
        if not (0.0 <= self.theta < math.pi):
            raise ValueError(f"theta {self.theta} outside [0, pi)")
        if not math.isfinite(self.rho):
            raise ValueError("non-finite rho")


def hough_dominant_line(
    edges: np.ndarray,
    initial_votes: float | None = None,
    decay: float = 0.9,
    vote_floor: int = 10,
) -> HoughLine:
    """Single dominant line of a binary edge map.

    Accumulates votes at 1 degree x 1 pixel resolution, lowers the vote
    threshold geometrically from ``initial_votes`` (default max(W, H)/2)
    until a cell qualifies, and returns the highest-voted cell; ties break
    to the smallest theta, then the smallest rho.
    """
    ys, xs = np.nonzero(edges)
    if xs.size < 2:
        raise HoughError(f"edge map has {xs.size} set pixels, need at least 2")
    h, w = edges.shape
    if initial_votes is None:
        initial_votes = max(w, h) / 2.0
    if not (0.0 < decay < 1.0):
        raise ValueError("decay must lie in (0, 1)")

    thetas = np.deg2rad(np.arange(180.0))
    diag = int(math.ceil(math.hypot(w - 1, h - 1)))
    n_rho = 2 * diag + 1
    acc = np.zeros((180, n_rho), dtype=np.int64)
    xs_f = xs.astype(np.float64)
    ys_f = ys.astype(np.float64)
    for ti in range(180):
        rho = np.floor(xs_f * math.cos(thetas[ti]) + ys_f * math.sin(thetas[ti]) + 0.5)
        acc[ti] = np.bincount(rho.astype(np.int64) + diag, minlength=n_rho)

    max_votes = int(acc.max())
    threshold = float(initial_votes)
    while threshold > vote_floor and max_votes < threshold:
        threshold *= decay
    threshold = max(threshold, float(vote_floor))
    if max_votes < threshold:
        raise HoughError(
            f"strongest line has {max_votes} votes, below the floor {vote_floor}"
        )
    ti, ri = divmod(int(acc.argmax()), n_rho)
    return HoughLine(rho=float(ri - diag), theta=math.radians(ti))


def rotation_angle_from_line(line: HoughLine) -> float:
    """Correction angle (degrees in (-45, 45]) that aligns the line to an axis.

    Feeding the result to rotate_image makes the detected dominant
    direction horizontal or vertical, whichever is nearer.
    """
    theta_deg = math.degrees(line.theta) % 180.0
    direction = (theta_deg + 90.0) % 180.0
    psi = direction % 90.0
    return psi if psi <= 45.0 else psi - 90.0


# ---------------------------------------------------------------------------
# rotation

def rotate_image(img: np.ndarray, angle_deg: float) -> tuple[np.ndarray, RigidTransform]:
    """Rotate about the image centre onto an expanded black canvas.

    Right-angle multiples take a lossless index-permutation path; other
    angles use bilinear interpolation.  The returned transform maps source
    coordinates into the rotated frame for box bookkeeping.
    """
    h, w = img.shape[:2]
    a = float(angle_deg) % 360.0
    transform = RigidTransform(a, False, False, (w, h))
    if a % 90.0 == 0.0:
        out = np.ascontiguousarray(np.rot90(img, int(a // 90)))
        return out, transform

    dw, dh = transform.dst_size
    c = math.cos(math.radians(a))
    s = math.sin(math.radians(a))
    ys, xs = np.meshgrid(np.arange(dh, dtype=np.float64),
                         np.arange(dw, dtype=np.float64), indexing="ij")
    xcd = xs + 0.5 - dw / 2.0
    ycd = ys + 0.5 - dh / 2.0
    # inverse rotation of the pixel-centre grid back into the source frame
    xsrc = c * xcd - s * ycd + w / 2.0 - 0.5
    ysrc = s * xcd + c * ycd + h / 2.0 - 0.5

    x0 = np.floor(xsrc)
    y0 = np.floor(ysrc)
    fx = xsrc - x0
    fy = ysrc - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    f = img.astype(np.float64)
    if img.ndim == 3:
        acc = np.zeros((dh, dw, img.shape[2]), dtype=np.float64)
    else:
        acc = np.zeros((dh, dw), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        sample = f[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        wgt = wgt * valid
        if img.ndim == 3:
            acc += sample * wgt[..., None]
        else:
            acc += sample * wgt

    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.floor(acc + 0.5), info.min, info.max).astype(img.dtype)
    else:
        out = acc.astype(img.dtype)
    return out, transform
