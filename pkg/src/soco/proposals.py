"""Centre-format boxes, proposal filtering, per-step sampling and box jitter."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from soco.errors import InvalidInputError

MIN_ASPECT, MAX_ASPECT = 1.0 / 3.0, 3.0
MIN_REL_SIZE, MAX_REL_SIZE = 0.3, 0.8


class BBox(NamedTuple):
    """Box with centre (x, y) and size (w, h) in continuous pixel coordinates."""

    x: float
    y: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2.0, self.y - self.h / 2.0,
                self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_valid(self) -> bool:
        return self.w > 0 and self.h > 0 and all(math.isfinite(v) for v in self)

    def scaled(self, sx: float, sy: float | None = None) -> "BBox":
        sy = sx if sy is None else sy
        return BBox(self.x * sx, self.y * sy, self.w * sx, self.h * sy)


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def passes_filter(box: BBox, width: float, height: float) -> bool:
    aspect = box.w / box.h
    rel = math.sqrt(box.w * box.h) / math.sqrt(width * height)
    return MIN_ASPECT <= aspect <= MAX_ASPECT and MIN_REL_SIZE <= rel <= MAX_REL_SIZE


def filter_proposals(boxes: Sequence[BBox], width: float, height: float) -> list[BBox]:
    """Keep boxes with 1/3 <= w/h <= 3 and 0.3 <= sqrt(wh)/sqrt(WH) <= 0.8, in order."""
    if width <= 0 or height <= 0:
        raise InvalidInputError(f"frame size must be positive, got {width}x{height}")
    return [b for b in boxes if passes_filter(b, width, height)]


def fallback_box(width: float, height: float) -> BBox:
    return BBox(width / 2.0, height / 2.0, width / 2.0, height / 2.0)


def sample_proposals(boxes: Sequence[BBox], k: int, rng: np.random.Generator,
                     width: float | None = None, height: float | None = None) -> list[BBox]:
    """Draw ``k`` proposals for one training step.

    Without replacement when enough boxes exist, with replacement when there
    are fewer than ``k``.  An empty list yields ``k`` copies of the centred
    half-frame box, which needs ``width``/``height``.
    """
    if k < 1:
        raise InvalidInputError(f"K must be >= 1, got {k}")
    if not boxes:
        if width is None or height is None:
            raise InvalidInputError("frame size required for the fallback box")
        return [fallback_box(width, height)] * k
    replace = len(boxes) < k
    idx = rng.choice(len(boxes), size=k, replace=replace)
    return [boxes[i] for i in idx]


def jitter_box(box: BBox, rng: np.random.Generator, prob: float = 0.5,
               max_offset: float = 0.1, shared: bool = False) -> BBox:
    """Randomly perturb centre and size by up to ``max_offset`` of the box size.

    With probability ``prob``: x += r1*w, y += r2*h, w += r3*w, h += r4*h,
    each r uniform in [-max_offset, max_offset].  ``shared`` uses a single r
    for all four components.
    """
    if rng.random() >= prob:
        return box
    r = np.repeat(rng.uniform(-max_offset, max_offset), 4) if shared \
        else rng.uniform(-max_offset, max_offset, size=4)
    return apply_jitter(box, r)


def apply_jitter(box: BBox, r: Sequence[float]) -> BBox:
    r1, r2, r3, r4 = (float(v) for v in r)
    return BBox(box.x + r1 * box.w, box.y + r2 * box.h, box.w + r3 * box.w, box.h + r4 * box.h)
