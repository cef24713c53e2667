"""Box arithmetic, patch cropping and box-to-feature-grid projection.

Coordinates are continuous pixels: pixel ``k`` spans ``[k, k+1)`` so its
centre sits at ``k + 0.5`` and a patch of side ``S`` has its centre at
``S / 2``.  Feature cell ``j`` of a grid with ``n`` cells is anchored at
``grid_offset(S, n, stride) + stride * j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in centre form.

    Zero-size boxes can be constructed (they come out of ``decode_box`` for
    zero distances) but are flagged by ``valid`` and rejected by ``iou``.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.cx, self.cy, self.w, self.h):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate in {self}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: {self}")

    @property
    def valid(self) -> bool:
        return self.w > 0 and self.h > 0

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(x + w / 2, y + h / 2, w, h)

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "BoundingBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if not (a.valid and b.valid):
        raise ValueError("iou needs boxes with positive width and height")
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_xywh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two ``[N, 4]`` arrays of ``x, y, w, h`` boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def center_error_xywh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ca = a[:, :2] + a[:, 2:] / 2
    cb = b[:, :2] + b[:, 2:] / 2
    return np.sqrt(((ca - cb) ** 2).sum(axis=1))


# --------------------------------------------------------------------------
# Cropping


@dataclass(frozen=True)
class CropSpec:
    template_size: int = 127
    search_size: int = 287
    context_amount: float = 0.5

    def __post_init__(self):
        for v in (self.template_size, self.search_size):
            if int(v) != v or v <= 0:
                raise ValueError("patch sizes must be positive integers")


def context_side(w: float, h: float, context_amount: float = 0.5) -> float:
    """Side of the square context region: ``sqrt((w+p)(h+p))``, ``p = c(w+h)``."""
    p = context_amount * (w + h)
    return math.sqrt((w + p) * (h + p))


def crop_square(image: np.ndarray, cx: float, cy: float, side: float, out_size: int) -> np.ndarray:
    """Bilinearly resample the square of ``side`` px centred on ``(cx, cy)``.

    Samples falling outside the image read the per-channel image mean.
    """
    if not side > 0:
        raise ValueError(f"crop side must be positive, got {side}")
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    mean = img.reshape(-1, img.shape[2]).mean(axis=0)
    step = side / out_size
    # continuous sample positions -> index space where pixel k has centre k
    t = (np.arange(out_size) + 0.5 - out_size / 2) * step
    xs = cx + t - 0.5
    ys = cy + t - 0.5
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    cols = [(np.clip(x, 0, W - 1), (x >= 0) & (x < W)) for x in (x0, x0 + 1)]

    def gather(yi):
        rows = img.take(np.clip(yi, 0, H - 1), axis=0)
        vy = (yi >= 0) & (yi < H)
        out = []
        for xi, vx in cols:
            vals = rows.take(xi, axis=1)
            ok = vy[:, None] & vx[None, :]
            if not ok.all():
                vals[~ok] = mean
            out.append(vals)
        return out[0] * (1 - fx) + out[1] * fx

    top, bot = gather(y0), gather(y0 + 1)
    out = top * (1 - fy) + bot * fy
    # samples with no in-image neighbour are exactly the mean, not a blend of it
    ry = ((y0 + 1 < 0) | (y0 >= H))[:, None]
    rx = ((x0 + 1 < 0) | (x0 >= W))[None, :]
    out[ry | rx] = mean
    return out


def crop_patch(image: np.ndarray, box: BoundingBox, out_size: int,
               context_amount: float = 0.5) -> tuple[np.ndarray, float]:
    """Crop the context square around ``box`` and resize it to ``out_size``.

    Returns ``(patch, scale)`` with ``scale = out_size / side``.
    """
    H, W = np.asarray(image).shape[:2]
    if not (0 <= box.cx <= W and 0 <= box.cy <= H):
        raise ValueError(f"box centre ({box.cx}, {box.cy}) outside the {W}x{H} image")
    side = context_side(box.w, box.h, context_amount)
    if not side > 0:
        raise ValueError("computed crop side is not positive")
    return crop_square(image, box.cx, box.cy, side, out_size), out_size / side


def patch_to_image(px: float, py: float, cx: float, cy: float, scale: float,
                   out_size: int) -> tuple[float, float]:
    """Map a patch coordinate back into the source image."""
    return cx + (px - out_size / 2) / scale, cy + (py - out_size / 2) / scale


def image_to_patch(x: float, y: float, cx: float, cy: float, scale: float,
                   out_size: int) -> tuple[float, float]:
    return out_size / 2 + (x - cx) * scale, out_size / 2 + (y - cy) * scale


# --------------------------------------------------------------------------
# Feature-grid projection


def grid_offset(patch_size: int, feat_size: int, stride: int) -> float:
    """Patch coordinate of feature cell 0 for a centred grid."""
    return (patch_size - (feat_size - 1) * stride) / 2


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class TemplateROI:
    """Inclusive cell range ``[row0..row1] x [col0..col1]`` on a feature grid."""

    row0: int
    col0: int
    row1: int
    col1: int
    grid_shape: tuple[int, int] = field(default=(13, 13))

    def __post_init__(self):
        H, W = self.grid_shape
        if not (0 <= self.row0 <= self.row1 < H and 0 <= self.col0 <= self.col1 < W):
            raise ValueError(f"ROI {self} does not fit the {H}x{W} grid")

    @property
    def height(self) -> int:
        return self.row1 - self.row0 + 1

    @property
    def width(self) -> int:
        return self.col1 - self.col0 + 1

    @property
    def cell_count(self) -> int:
        return self.height * self.width

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.grid_shape, dtype=bool)
        m[self.row0:self.row1 + 1, self.col0:self.col1 + 1] = True
        return m

    @classmethod
    def full(cls, grid_shape: tuple[int, int]) -> "TemplateROI":
        return cls(0, 0, grid_shape[0] - 1, grid_shape[1] - 1, tuple(grid_shape))

    @classmethod
    def centered(cls, grid_shape: tuple[int, int], size: int) -> "TemplateROI":
        """The fixed central ``size x size`` region used by pre-fixed cropping."""
        H, W = grid_shape
        if size > min(H, W) or size < 1:
            raise ValueError(f"prefixed crop of {size} does not fit a {H}x{W} grid")
        r0, c0 = (H - size) // 2, (W - size) // 2
        return cls(r0, c0, r0 + size - 1, c0 + size - 1, tuple(grid_shape))


def _project_axis(lo: float, hi: float, centre: float, offset: float, stride: int,
                  n: int) -> tuple[int, int]:
    first = round_half_up((lo - offset) / stride)
    last = round_half_up((hi - offset) / stride) - 1  # mapped far corner is exclusive
    first, last = max(first, 0), min(last, n - 1)
    if last < first:
        first = last = min(max(round_half_up((centre - offset) / stride), 0), n - 1)
    return first, last


def project_box(box_in_patch: BoundingBox, stride: int, patch_size: int,
                feat_size: int) -> TemplateROI:
    """Project a patch-space box onto the feature grid as an ROI.

    Corners map through ``(x - offset) / stride`` and round half-up; the far
    corner is exclusive.  The result is clamped to the grid and never empty.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    off = grid_offset(patch_size, feat_size, stride)
    x0, y0, x1, y1 = box_in_patch.corners
    c0, c1 = _project_axis(x0, x1, box_in_patch.cx, off, stride, feat_size)
    r0, r1 = _project_axis(y0, y1, box_in_patch.cy, off, stride, feat_size)
    return TemplateROI(r0, c0, r1, c1, (feat_size, feat_size))
