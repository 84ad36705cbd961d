"""Normalized axis-aligned boxes and their overlap measures."""
from __future__ import annotations

import warnings
from typing import NamedTuple


class BBox(NamedTuple):
    """Box in normalized image coordinates, ``x1 <= x2`` and ``y1 <= y2``."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return cx, cy, self.width, self.height

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> BBox:
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def clip(self) -> BBox:
        return BBox(*(min(1.0, max(0.0, v)) for v in self))

    def is_valid(self) -> bool:
        return 0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0


def intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return max(0.0, w) * max(0.0, h)


def iou(a: BBox, b: BBox) -> float:
    inter = intersection(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def giou(b_t: BBox, b_p: BBox) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box.

    Two zero-area boxes at the same point have an empty enclosing box; the
    value is then defined as 0 and a warning is emitted.
    """
    inter = intersection(b_t, b_p)
    union = b_t.area + b_p.area - inter
    enclose = (max(b_t.x2, b_p.x2) - min(b_t.x1, b_p.x1)) * \
              (max(b_t.y2, b_p.y2) - min(b_t.y1, b_p.y1))
    if enclose <= 0:
        warnings.warn("giou: degenerate zero-area enclosing box, returning 0", RuntimeWarning)
        return 0.0
    iou_val = inter / union if union > 0 else 0.0
    return iou_val - (enclose - union) / enclose
