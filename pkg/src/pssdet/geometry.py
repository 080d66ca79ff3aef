"""Box arithmetic in continuous corner form (x1, y1, x2, y2)."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2


class LtrbTarget(NamedTuple):
    """Distances from an anchor point to the left/top/right/bottom sides."""

    l: float
    t: float
    r: float
    b: float


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    overlap = inter / union if union > 0 else 0.0
    enclosing = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if enclosing <= 0:
        return overlap
    return overlap - (enclosing - union) / enclosing


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode(point: tuple[float, float], box: Box, stride: float = 1.0) -> LtrbTarget:
    x, y = point
    return LtrbTarget((x - box.x1) / stride, (y - box.y1) / stride,
                      (box.x2 - x) / stride, (box.y2 - y) / stride)


def decode(point: tuple[float, float], t: LtrbTarget, stride: float = 1.0) -> Box:
    x, y = point
    return Box(x - t.l * stride, y - t.t * stride, x + t.r * stride, y + t.b * stride)


def decode_array(points: np.ndarray, ltrb: np.ndarray, strides: np.ndarray) -> np.ndarray:
    """Vectorised :func:`decode`: points (N, 2), ltrb (N, 4), strides (N,)."""
    s = np.asarray(strides, dtype=np.float64)[:, None]
    d = ltrb * s
    return np.stack([points[:, 0] - d[:, 0], points[:, 1] - d[:, 1],
                     points[:, 0] + d[:, 2], points[:, 1] + d[:, 3]], axis=1)


def centerness_target(t: LtrbTarget) -> float:
    if min(t) <= 0:
        return 0.0
    return math.sqrt((min(t.l, t.r) / max(t.l, t.r)) * (min(t.t, t.b) / max(t.t, t.b)))


def centerness_array(ltrb: np.ndarray) -> np.ndarray:
    ltrb = np.asarray(ltrb, dtype=np.float64)
    lr = ltrb[..., [0, 2]]
    tb = ltrb[..., [1, 3]]
    ok = ltrb.min(axis=-1) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        val = (lr.min(-1) / lr.max(-1)) * (tb.min(-1) / tb.max(-1))
    return np.where(ok, np.sqrt(np.where(ok, val, 0.0)), 0.0)


def center_region_contains(point: tuple[float, float], box: Box, radius: float, stride: float) -> bool:
    """Inside the box and within radius*stride of its centre on both axes."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    x, y = point
    if not (box.x1 < x < box.x2 and box.y1 < y < box.y2):
        return False
    cx, cy = box.center
    reach = radius * stride
    return abs(x - cx) < reach and abs(y - cy) < reach
