"""Axis-aligned box arithmetic.

Boxes are continuous corner-format ``(x1, y1, x2, y2)`` with exact
``width * height`` areas (no +1 pixel convention). Scalar helpers take
:class:`Box` values; the ``*_array`` helpers operate on ``(N, 4)`` float
arrays and are what the hot paths use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"box must have positive width and height, got {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def contains(self, other: "Box") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 < self.score < 1.0):
            raise ValueError(f"score must lie in (0, 1), got {self.score}")


def area(b: Box) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in ``[0, 1]``."""
    if a == b:
        return 1.0
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def clip(b: Box, bounds: Box) -> Box | None:
    """Intersect ``b`` with ``bounds``; ``None`` when the overlap has zero area."""
    x1 = max(b.x1, bounds.x1)
    y1 = max(b.y1, bounds.y1)
    x2 = min(b.x2, bounds.x2)
    y2 = min(b.y2, bounds.y2)
    if x2 <= x1 or y2 <= y1:
        return None
    return Box(x1, y1, x2, y2)


def jitter(b: Box, rng: np.random.Generator, amplitude: float) -> Box:
    """Shift each edge by up to ``amplitude`` times the box side length.

    For ``amplitude <= 0.05`` the result keeps IoU > 0.8 with ``b``.
    """
    w, h = b.width, b.height
    d = rng.uniform(-amplitude, amplitude, size=4)
    return Box(b.x1 + d[0] * w, b.y1 + d[1] * h, b.x2 + d[2] * w, b.y2 + d[3] * h)


# ---------------------------------------------------------------------------
# Array forms
# ---------------------------------------------------------------------------


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    # identical boxes give inter == union bit-for-bit, hence exactly 1.0
    return inter / union


def clip_array(boxes: np.ndarray, bounds: Box) -> np.ndarray:
    lo = np.array([bounds.x1, bounds.y1, bounds.x1, bounds.y1])
    hi = np.array([bounds.x2, bounds.y2, bounds.x2, bounds.y2])
    return np.minimum(np.maximum(boxes, lo), hi)


def valid_mask(boxes: np.ndarray, min_size: float = 0.0) -> np.ndarray:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return (w > min_size) & (h > min_size) & np.all(np.isfinite(boxes), axis=1)


def descending_order(scores: np.ndarray) -> np.ndarray:
    """Indices sorting ``scores`` high to low, ties broken by lower index."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores)))


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Args:
        boxes: ``(N, 4)`` corner-format boxes.
        scores: ``(N,)`` scores.
        iou_threshold: boxes with IoU strictly above this against an already
            kept box are suppressed.

    Returns:
        Kept indices in descending-score order (lower index first on ties).
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = descending_order(np.asarray(scores, dtype=np.float64))
    keep: list[int] = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        overlaps = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[overlaps <= iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    if len(dets) == 0:
        if not 0.0 < iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
        return []
    boxes = boxes_to_array(d.box for d in dets)
    scores = np.array([d.score for d in dets])
    return nms_array(boxes, scores, iou_threshold).tolist()
