"""Axis-aligned box geometry and mean-IoU accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DETECTED = "D"
TRACKED = "T"
GROUND_TRUTH = "G"


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        isfinite = math.isfinite
        if not (isfinite(self.x_min) and isfinite(self.y_min) and isfinite(self.x_max) and isfinite(self.y_max)):
            raise ValueError(f"non-finite box coordinates: {self.as_tuple()}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"box has min > max: {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def corners(self) -> list[tuple[float, float]]:
        return [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_min, self.y_max),
            (self.x_max, self.y_max),
        ]

    def translated(self, dx: float, dy: float) -> BoundingBox:
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clipped(self, width: float, height: float) -> BoundingBox | None:
        """Intersection with the frame plane, or None when nothing is visible."""
        x0, x1 = max(self.x_min, 0.0), min(self.x_max, width)
        y0, y1 = max(self.y_min, 0.0), min(self.y_max, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class BoxSet:
    """Boxes of one frame, each tagged with the identity of the object it belongs to."""

    boxes: tuple[BoundingBox, ...] = ()
    ids: tuple[int, ...] = ()
    role: str = GROUND_TRUTH
    _by_id: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.boxes) != len(self.ids):
            raise ValueError("boxes and ids differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate object identity in box set")
        if self.role not in (DETECTED, TRACKED, GROUND_TRUTH):
            raise ValueError(f"unknown box-set role {self.role!r}")
        object.__setattr__(self, "_by_id", dict(zip(self.ids, self.boxes)))

    def __len__(self) -> int:
        return len(self.boxes)

    def get(self, object_id: int) -> BoundingBox | None:
        return self._by_id.get(object_id)

    def without(self, object_id: int) -> BoxSet:
        keep = [(b, i) for b, i in zip(self.boxes, self.ids) if i != object_id]
        return BoxSet(tuple(b for b, _ in keep), tuple(i for _, i in keep), self.role)


def _overlap(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Overlap area over union area; 0 when the union is empty."""
    inter = _overlap(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def rasterize_iou(a: BoundingBox, b: BoundingBox, grid_step: float) -> float:
    """Grid-counting estimate of IoU, used to cross-check :func:`iou`.

    Cell centres on a regular lattice of pitch ``grid_step`` covering the
    joint bounding region are tested for membership in each box.  The
    lattice is a product of two 1-D grids, so membership counts factor into
    per-axis counts and no 2-D mask is ever materialised.
    """
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    x0, x1 = min(a.x_min, b.x_min), max(a.x_max, b.x_max)
    y0, y1 = min(a.y_min, b.y_min), max(a.y_max, b.y_max)
    nx = max(1, int(math.ceil((x1 - x0) / grid_step)))
    ny = max(1, int(math.ceil((y1 - y0) / grid_step)))
    xs = x0 + (np.arange(nx) + 0.5) * grid_step
    ys = y0 + (np.arange(ny) + 0.5) * grid_step

    in_ax = (xs >= a.x_min) & (xs <= a.x_max)
    in_bx = (xs >= b.x_min) & (xs <= b.x_max)
    in_ay = (ys >= a.y_min) & (ys <= a.y_max)
    in_by = (ys >= b.y_min) & (ys <= b.y_max)

    count_a = int(in_ax.sum()) * int(in_ay.sum())
    count_b = int(in_bx.sum()) * int(in_by.sum())
    count_both = int((in_ax & in_bx).sum()) * int((in_ay & in_by).sum())
    count_any = count_a + count_b - count_both
    if count_any == 0:
        return 0.0
    return count_both / count_any


def mean_iou(pred: BoxSet, truth: BoxSet) -> float:
    """Sum of IoU between each predicted box and its ground truth, over the truth count.

    Predicted boxes are matched to ground truth by object identity; a
    predicted box whose object is absent from ``truth`` contributes 0.
    """
    if len(truth) == 0:
        raise ValueError("mean_iou needs at least one ground-truth box")
    total = 0.0
    for box, object_id in zip(pred.boxes, pred.ids):
        gt = truth.get(object_id)
        if gt is not None:
            total += iou(box, gt)
    return total / len(truth)
