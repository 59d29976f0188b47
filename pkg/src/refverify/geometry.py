"""Axis-aligned boxes, IoU and ACC@t accuracy.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)`` using
continuous pixel coordinates. RefCOCO annotations arrive as ``[x, y, w, h]``
and are converted with :meth:`BoundingBox.from_xywh`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

if TYPE_CHECKING:
    from refverify.pipeline import RecOutcome


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box corners out of order: {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BoundingBox:
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @classmethod
    def from_list(cls, values: Sequence[float], box_format: str = "xyxy") -> BoundingBox:
        if len(values) != 4:
            raise ValueError(f"expected 4 numbers, got {len(values)}")
        if box_format == "xywh":
            return cls.from_xywh(*values)
        if box_format == "xyxy":
            return cls(*(float(v) for v in values))
        raise ValueError(f"unknown box format {box_format!r}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def shift(self, dx: float, dy: float) -> BoundingBox:
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class MatchThreshold:
    iou_min: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.iou_min <= 1.0:
            raise ValueError(f"iou_min must lie in [0, 1], got {self.iou_min}")


ACC_05 = MatchThreshold(0.5)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    # clamp guards float rounding just above 1 for near-identical boxes
    return min(1.0, inter / union)


def is_hit(pred: BoundingBox, gt: BoundingBox, t: MatchThreshold = ACC_05) -> bool:
    """True when the IoU strictly exceeds the threshold."""
    return iou(pred, gt) > t.iou_min


def acc_at(
    predictions: Iterable[tuple[RecOutcome | BoundingBox | None, BoundingBox]],
    t: MatchThreshold = ACC_05,
) -> float:
    """Fraction of (outcome, ground truth) pairs that are hits.

    An outcome may be a pipeline ``RecOutcome``, a bare box, or ``None``.
    Abstentions count as misses.
    """
    items = list(predictions)
    if not items:
        raise ValueError("no items")
    hits = 0
    for outcome, gt in items:
        box = getattr(outcome, "box", outcome)
        if box is not None and is_hit(box, gt, t):
            hits += 1
    return hits / len(items)
