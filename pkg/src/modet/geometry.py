"""Axis-aligned box geometry: IoU, generalized IoU, and enclosing boxes.

Boxes are stored in normalized center form (cx, cy, w, h) on the unit
canvas; corner form (x0, y0, x1, y1) is a derived view.  Center form is
what the detector regresses (so L1 is taken directly on it), while the
overlap measures are computed in corner form.

Zero-area boxes are legal inputs everywhere: early-training model output
can collapse to a point, and that must yield defined values (IoU 0
against anything disjoint) rather than exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Normalized center-format rectangle: center (cx, cy), size (w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box size must be nonnegative, got w={self.w}, h={self.h}")

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return to_xyxy(self)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def to_xyxy(b: Box) -> tuple[float, float, float, float]:
    """Corner-form view (x0, y0, x1, y1) with x0 <= x1 and y0 <= y1."""
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def from_xyxy(x0: float, y0: float, x1: float, y1: float) -> Box:
    """Inverse of to_xyxy."""
    if x1 < x0 or y1 < y0:
        raise ValueError(f"degenerate corners ({x0},{y0},{x1},{y1})")
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def _intersection_area(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = to_xyxy(a)
    bx0, by0, bx1, by1 = to_xyxy(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1].  0 when the union has no area."""
    inter = _intersection_area(a, b)
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: iou(a, b) - (C - U) / C with C the smallest
    enclosing box area.  Lies in (-1, 1]; equals IoU when C = U.
    Returns 0 if both boxes are degenerate (C = 0).
    """
    inter = _intersection_area(a, b)
    union = a.area() + b.area() - inter
    hull = enclosing_box([a, b])
    c = hull.area()
    if c <= 0:
        return 0.0
    iou_val = inter / union if union > 0 else 0.0
    return iou_val - (c - union) / c


def enclosing_box(boxes: Sequence[Box] | Iterable[Box]) -> Box:
    """Smallest axis-aligned box containing every input box."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("empty box set")
    corners = [to_xyxy(b) for b in boxes]
    x0 = min(c[0] for c in corners)
    y0 = min(c[1] for c in corners)
    x1 = max(c[2] for c in corners)
    y1 = max(c[3] for c in corners)
    return from_xyxy(x0, y0, x1, y1)


# Array versions over (N, 4) center-form rows, used by the matcher and the
# evaluation pooling loops.  Cross-checked against the scalar functions in
# the tests.

def boxes_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between center-form rows: (N, 4) x (M, 4) -> (N, M)."""
    ax = boxes_to_xyxy(a)
    bx = boxes_to_xyxy(b)
    lt = np.maximum(ax[:, None, :2], bx[None, :, :2])
    rb = np.minimum(ax[:, None, 2:], bx[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ax[:, 2] - ax[:, 0]) * (ax[:, 3] - ax[:, 1])
    area_b = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU between center-form rows."""
    ax = boxes_to_xyxy(a)
    bx = boxes_to_xyxy(b)
    lt = np.maximum(ax[:, None, :2], bx[None, :, :2])
    rb = np.minimum(ax[:, None, 2:], bx[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ax[:, 2] - ax[:, 0]) * (ax[:, 3] - ax[:, 1])
    area_b = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter

    hull_lt = np.minimum(ax[:, None, :2], bx[None, :, :2])
    hull_rb = np.maximum(ax[:, None, 2:], bx[None, :, 2:])
    hull_wh = np.clip(hull_rb - hull_lt, 0.0, None)
    hull = hull_wh[..., 0] * hull_wh[..., 1]

    iou_val = np.zeros_like(inter)
    np.divide(inter, union, out=iou_val, where=union > 0)
    out = np.zeros_like(inter)
    np.divide(hull - union, hull, out=out, where=hull > 0)
    return np.where(hull > 0, iou_val - out, 0.0)
