"""Box geometry: overlap measures, margin expansion and non-maximum suppression.

Boxes are stored COCO-style as ``(x, y, w, h)`` in continuous pixel
coordinates. Corner form ``(x1, y1, x2, y2)`` only appears at the edges of the
API (``to_corners`` / ``from_corners``) and inside the vectorised helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Box",
    "Detection",
    "ImageBounds",
    "DegenerateBoxError",
    "iou",
    "giou",
    "pairwise_iou",
    "nms",
    "expand_with_margin",
    "to_corners",
    "from_corners",
]


class DegenerateBoxError(ValueError):
    """Raised when a measure is undefined for the given boxes."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"box field {name} is not finite: {value!r}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box has negative size: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_xywh(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise ValueError(f"expected 4 box values, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class Detection:
    """A scored, categorised box emitted by a detector."""

    box: Box
    score: float
    category_id: int = 1

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score outside [0, 1]: {self.score!r}")


@dataclass(frozen=True)
class ImageBounds:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image bounds must be integers")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image bounds must be positive: {self.width}x{self.height}")


def to_corners(b: Box) -> tuple[float, float, float, float]:
    return b.x, b.y, b.x + b.w, b.y + b.h


def from_corners(x1: float, y1: float, x2: float, y2: float) -> Box:
    if x2 < x1 or y2 < y1:
        raise ValueError(f"inverted corners: ({x1}, {y1}, {x2}, {y2})")
    return Box(x1, y1, x2 - x1, y2 - y1)


def _intersection(a: Box, b: Box) -> float:
    # capping at the smaller side keeps inter <= either area under rounding
    iw = min(min(a.x + a.w, b.x + b.w) - max(a.x, b.x), a.w, b.w)
    ih = min(min(a.y + a.h, b.y + b.h) - max(a.y, b.y), a.h, b.h)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when both boxes are empty."""
    inter = _intersection(a, b)
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalised IoU, in ``[-1, 1]``.

    Raises:
        DegenerateBoxError: if both boxes have zero area.
    """
    area_a = a.w * a.h
    area_b = b.w * b.h
    if area_a <= 0 and area_b <= 0:
        raise DegenerateBoxError("giou undefined for two zero-area boxes")
    inter = _intersection(a, b)
    union = area_a + area_b - inter
    hull_w = max(max(a.x + a.w, b.x + b.w) - min(a.x, b.x), a.w, b.w)
    hull_h = max(max(a.y + a.h, b.y + b.h) - min(a.y, b.y), a.h, b.h)
    hull = max(hull_w * hull_h, union)
    return inter / union - (hull - union) / hull


def _box_arrays(boxes: Iterable[Box]) -> tuple[np.ndarray, np.ndarray]:
    """``(n, 4)`` xywh array and matching ``(n, 4)`` corner array."""
    xywh = np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)
    corners = xywh.copy()
    corners[:, 2] += corners[:, 0]
    corners[:, 3] += corners[:, 1]
    return xywh, corners


def _pairwise_iou_arrays(xa, ca, xb, cb) -> np.ndarray:
    # same operation order as the scalar iou() so results agree bit for bit
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    iw = np.minimum(iw, np.minimum(xa[:, None, 2], xb[None, :, 2]))
    ih = np.minimum(ih, np.minimum(xa[:, None, 3], xb[None, :, 3]))
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = xa[:, 2] * xa[:, 3]
    area_b = xb[:, 2] * xb[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def pairwise_iou(boxes_a: Sequence[Box], boxes_b: Sequence[Box]) -> np.ndarray:
    """IoU matrix of shape ``(len(boxes_a), len(boxes_b))``."""
    return _pairwise_iou_arrays(*_box_arrays(boxes_a), *_box_arrays(boxes_b))


def _score_order(dets: Sequence[Detection]) -> list[int]:
    # python's sort is stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy, class-agnostic non-maximum suppression.

    A detection is kept iff its IoU with every previously kept detection is
    strictly below ``iou_threshold``; boxes that do not overlap at all never
    suppress each other, so a threshold of 0 removes every overlapping box
    and nothing else. Output is ordered by descending score, ties resolved by
    input position.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold outside [0, 1]: {iou_threshold!r}")
    if not dets:
        return []
    order = _score_order(dets)
    boxes = [dets[i].box for i in order]
    ious = pairwise_iou(boxes, boxes)
    n = len(order)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(order[i])
        row = ious[i, i + 1:]
        suppressed[i + 1:] |= (row >= iou_threshold) & (row > 0)
    return [dets[i] for i in keep]


def expand_with_margin(b: Box, margin: float, bounds: ImageBounds) -> Box:
    """Grow each side by ``margin`` times the box's own dimension, then clamp.

    >>> expand_with_margin(Box(10, 10, 20, 20), 0.25, ImageBounds(100, 100))
    Box(x=5.0, y=5.0, w=30.0, h=30.0)
    """
    if margin < 0:
        raise ValueError(f"margin must be non-negative: {margin!r}")
    x1 = b.x - margin * b.w
    y1 = b.y - margin * b.h
    x2 = x1 + b.w * (1 + 2 * margin)
    y2 = y1 + b.h * (1 + 2 * margin)
    x1 = min(max(x1, 0.0), bounds.width)
    y1 = min(max(y1, 0.0), bounds.height)
    x2 = min(max(x2, 0.0), bounds.width)
    y2 = min(max(y2, 0.0), bounds.height)
    if margin == 0 and 0 <= b.x and 0 <= b.y and b.x2 <= bounds.width and b.y2 <= bounds.height:
        return b
    return Box(float(x1), float(y1), float(x2 - x1), float(y2 - y1))
