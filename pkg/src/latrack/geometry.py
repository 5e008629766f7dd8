"""Box arithmetic, score-map grids, and the offset encoding linking them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in corner form (x1, y1, x2, y2), pixels.

    Zero-area boxes are legal values; negative extents are not.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"negative box extent: {self}")

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return (self.x1 + self.x2) / 2

    @property
    def cy(self) -> float:
        return (self.y1 + self.y2) / 2

    def area(self) -> float:
        return self.w * self.h

    def aspect(self) -> float:
        """Height/width ratio; width clamped to 1 px for degenerate boxes."""
        return max(self.h, 1.0) / max(self.w, 1.0)

    def padded_size(self) -> float:
        """Context-padded geometric mean size used by the scale penalty.

        Dimensions are clamped to 1 px so degenerate boxes stay comparable.
        """
        w, h = max(self.w, 1.0), max(self.h, 1.0)
        ctx = (w + h) / 2
        return float(np.sqrt((w + ctx) * (h + ctx)))

    def shrink(self, ratio: float) -> "Box":
        """Scale width and height by `ratio` about the box center."""
        w, h = self.w * ratio, self.h * ratio
        return Box(self.cx - w / 2, self.cy - h / 2, self.cx + w / 2, self.cy + h / 2)

    def contains(self, px: float, py: float) -> bool:
        """Inclusive point-in-box test (edges count as inside)."""
        return self.x1 <= px <= self.x2 and self.y1 <= py <= self.y2

    def to_xyxy(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def to_xywh(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Box":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @classmethod
    def from_cxcywh(cls, cx, cy, w, h) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class Grid:
    """Score-map lattice: `height` x `width` cells, `stride` pixels apart.

    Cell (i, j) sits at pixel (origin + j*stride, origin + i*stride); the
    default origin centers the lattice inside a square search crop.
    """

    height: int
    width: int
    stride: float
    origin: float

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.stride <= 0:
            raise ValueError("grid dimensions and stride must be positive")

    @classmethod
    def centered(cls, size: int, stride: float, image_size: int) -> "Grid":
        """Square grid centered in an `image_size`-pixel crop."""
        origin = (image_size - 1) / 2 - (size - 1) * stride / 2
        return cls(size, size, stride, origin)

    def point(self, i: int, j: int) -> tuple[float, float]:
        return (self.origin + j * self.stride, self.origin + i * self.stride)


def grid_points(grid: Grid) -> np.ndarray:
    """Row-major (H*W, 2) array of cell-center (x, y) pixel coordinates."""
    xs = grid.origin + np.arange(grid.width, dtype=np.float64) * grid.stride
    ys = grid.origin + np.arange(grid.height, dtype=np.float64) * grid.stride
    px, py = np.meshgrid(xs, ys)
    return np.stack([px.ravel(), py.ravel()], axis=1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union has zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_many(boxes: np.ndarray, box: Box) -> np.ndarray:
    """IoU of each row of an (..., 4) corner-form array against one box."""
    boxes = np.asarray(boxes, dtype=np.float64)
    iw = np.minimum(boxes[..., 2], box.x2) - np.maximum(boxes[..., 0], box.x1)
    ih = np.minimum(boxes[..., 3], box.y2) - np.maximum(boxes[..., 1], box.y1)
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    areas = (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])
    union = areas + box.area() - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_offsets(point, box: Box) -> np.ndarray:
    """Distances (l, t, r, b) from a point inside `box` to its four sides."""
    px, py = float(point[0]), float(point[1])
    if not box.contains(px, py):
        raise ValueError(f"point ({px}, {py}) outside box {box}")
    return np.array([px - box.x1, py - box.y1, box.x2 - px, box.y2 - py])


def decode_box(point, offsets) -> Box:
    """Inverse of encode_offsets: rebuild the box around a grid point."""
    l, t, r, b = (float(v) for v in offsets)
    if min(l, t, r, b) < 0:
        raise ValueError(f"negative offsets: {(l, t, r, b)}")
    px, py = float(point[0]), float(point[1])
    return Box(px - l, py - t, px + r, py + b)


def encode_offset_map(grid: Grid, box: Box) -> np.ndarray:
    """(H, W, 4) side distances from every grid point to `box`.

    Cells outside the box get negative entries; callers mask to cells inside.
    """
    pts = grid_points(grid).reshape(grid.height, grid.width, 2)
    l = pts[..., 0] - box.x1
    t = pts[..., 1] - box.y1
    r = box.x2 - pts[..., 0]
    b = box.y2 - pts[..., 1]
    return np.stack([l, t, r, b], axis=-1)


def decode_box_map(grid: Grid, offsets: np.ndarray) -> np.ndarray:
    """(H, W, 4) corner-form boxes from an (H, W, 4) nonnegative offset map."""
    offsets = np.asarray(offsets, dtype=np.float64)
    pts = grid_points(grid).reshape(grid.height, grid.width, 2)
    x1 = pts[..., 0] - offsets[..., 0]
    y1 = pts[..., 1] - offsets[..., 1]
    x2 = pts[..., 0] + offsets[..., 2]
    y2 = pts[..., 1] + offsets[..., 3]
    return np.stack([x1, y1, x2, y2], axis=-1)
