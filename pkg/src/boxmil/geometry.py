"""Axis-aligned box arithmetic shared by every other module.

Boxes are stored in corner form (x1, y1, x2, y2); the center form
(cx, cy, w, h) is computed on demand. All operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous pixel coordinates (corner form)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box corners: ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        if w < 0 or h < 0:
            raise ValueError(f"negative box size: w={w}, h={h}")
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def convert(box: Box, target: str) -> tuple[float, float, float, float]:
    """Reparameterize a box: 'corner' -> (x1,y1,x2,y2), 'center' -> (cx,cy,w,h)."""
    if target == "corner":
        return (box.x1, box.y1, box.x2, box.y2)
    if target == "center":
        return (box.cx, box.cy, box.w, box.h)
    raise ValueError(f"unknown box form {target!r}, expected 'corner' or 'center'")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Degenerate (zero-area) boxes have IoU 0 with everything except an
    identical degenerate box, which has IoU 1 by convention.
    """
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if (a.x1, a.y1, a.x2, a.y2) == (b.x1, b.y1, b.x2, b.y2) else 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0.0)
    degenerate = (union <= 0.0) & np.all(a[:, None, :] == b[None, :, :], axis=2)
    out[degenerate] = 1.0
    return out


def clip(box: Box, bounds: Box, min_size: float = 0.0) -> Box:
    """Clamp a box into bounds, keeping width/height at least min_size.

    When the clamped box is thinner than min_size the near edge is pushed
    back inside the bounds, so the result hugs the boundary. Idempotent.
    """
    if min_size < 0:
        raise ValueError(f"min_size must be non-negative, got {min_size}")
    if bounds.w < min_size or bounds.h < min_size:
        raise ValueError(
            f"bounds {bounds.w}x{bounds.h} cannot hold a box of min size {min_size}"
        )
    x1 = min(max(box.x1, bounds.x1), bounds.x2)
    x2 = min(max(box.x2, bounds.x1), bounds.x2)
    y1 = min(max(box.y1, bounds.y1), bounds.y2)
    y2 = min(max(box.y2, bounds.y1), bounds.y2)
    if x2 - x1 < min_size:
        x2 = x1 + min_size
        if x2 > bounds.x2:
            x2 = bounds.x2
            x1 = x2 - min_size
    if y2 - y1 < min_size:
        y2 = y1 + min_size
        if y2 > bounds.y2:
            y2 = bounds.y2
            y1 = y2 - min_size
    return Box(x1, y1, x2, y2)


def clip_array(boxes: np.ndarray, bounds: Box, min_size: float = 0.0) -> np.ndarray:
    """Vectorized clip() over an (N, 4) corner-form array."""
    if bounds.w < min_size or bounds.h < min_size:
        raise ValueError(
            f"bounds {bounds.w}x{bounds.h} cannot hold a box of min size {min_size}"
        )
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    b[:, 0] = np.clip(b[:, 0], bounds.x1, bounds.x2)
    b[:, 2] = np.clip(b[:, 2], bounds.x1, bounds.x2)
    b[:, 1] = np.clip(b[:, 1], bounds.y1, bounds.y2)
    b[:, 3] = np.clip(b[:, 3], bounds.y1, bounds.y2)
    for lo, hi, limit in ((0, 2, bounds.x2), (1, 3, bounds.y2)):
        thin = b[:, hi] - b[:, lo] < min_size
        b[thin, hi] = b[thin, lo] + min_size
        over = thin & (b[:, hi] > limit)
        b[over, hi] = limit
        b[over, lo] = limit - min_size
    return b


def boxes_corner_to_center(boxes: np.ndarray) -> np.ndarray:
    """(N, 4) corner form -> (N, 4) center form (cx, cy, w, h)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(b)
    out[:, 0] = 0.5 * (b[:, 0] + b[:, 2])
    out[:, 1] = 0.5 * (b[:, 1] + b[:, 3])
    out[:, 2] = b[:, 2] - b[:, 0]
    out[:, 3] = b[:, 3] - b[:, 1]
    return out


def boxes_center_to_corner(boxes: np.ndarray) -> np.ndarray:
    """(N, 4) center form (cx, cy, w, h) -> (N, 4) corner form."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(b)
    out[:, 0] = b[:, 0] - 0.5 * b[:, 2]
    out[:, 1] = b[:, 1] - 0.5 * b[:, 3]
    out[:, 2] = b[:, 0] + 0.5 * b[:, 2]
    out[:, 3] = b[:, 1] + 0.5 * b[:, 3]
    return out
