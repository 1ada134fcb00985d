"""Bounding boxes and overlap."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner ``(x, y)`` and extent ``(w, h)`` in pixels."""

    x: float
    y: float
    w: float
    h: float
    category_id: int = 0

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_xyxy(self):
        return self.x, self.y, self.x + self.w, self.y + self.h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes with positive area."""
    ax0, ay0, ax1, ay1 = a.as_xyxy()
    bx0, by0, bx1, by1 = b.as_xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)
