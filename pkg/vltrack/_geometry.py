import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from numbers import Real
from typing import Any

import numpy as np
from numpy.typing import NDArray

from ._errors import ValidationFailure


class InvalidGeometry(ValidationFailure):
    """Raised for non-finite coordinates or negative extents."""


class DegenerateGroundTruth(ValidationFailure):
    """Raised when a ground-truth box has no width or no height where one is required."""


@dataclass(frozen=True)
class BoundingBox:
    """
    An axis-aligned box in pixel units, stored as the top-left corner and the extents
    (the ``[x, y, w, h]`` annotation convention).

    Zero-area boxes are legal; they are used as placeholders for frames where the target is absent.
    """

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, Real):
                raise InvalidGeometry(f"`{name}` must be a real number, got {value!r}")
            value = float(value)
            if not math.isfinite(value):
                raise InvalidGeometry(f"`{name}` must be finite, got {value}")
            # Always stored as floats.
            object.__setattr__(self, name, value)

        if self.w < 0 or self.h < 0:
            raise InvalidGeometry(f"Box extents must be non-negative, got w={self.w}, h={self.h}")

    @classmethod
    def from_sequence(cls, values: Sequence[Any]) -> "BoundingBox":
        if len(values) != 4:
            raise InvalidGeometry(f"A box needs exactly 4 values, got {len(values)}")
        return cls(*values)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def has_area(self) -> bool:
        return self.w > 0 and self.h > 0

    def shifted(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)


def _overlap(left1: float, right1: float, left2: float, right2: float) -> float:
    return max(0.0, min(right1, right2) - max(left1, left2))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Returns the intersection-over-union ratio of two boxes, in ``[0, 1]``.
    Two boxes with an empty union (both degenerate) have IoU 0.
    """
    intersection = _overlap(a.x, a.right, b.x, b.right) * _overlap(a.y, a.bottom, b.y, b.bottom)
    union = a.area + b.area - intersection
    if union <= 0:
        return 0.0
    return min(1.0, intersection / union)


def center_distance(a: BoundingBox, b: BoundingBox) -> float:
    """Returns the Euclidean distance between box centers, in pixels."""
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def normalized_center_distance(pred: BoundingBox, gt: BoundingBox) -> float:
    """
    Returns the center offset with its components divided by the ground-truth width and height.
    """
    if not gt.has_area():
        raise DegenerateGroundTruth(f"Ground truth has a degenerate extent: {gt.as_tuple()}")
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot((px - gx) / gt.w, (py - gy) / gt.h)


def boxes_to_array(boxes: Iterable[BoundingBox]) -> NDArray[np.float64]:
    """Packs boxes into an ``(N, 4)`` array of ``[x, y, w, h]`` rows."""
    array = np.array([box.as_tuple() for box in boxes], dtype=np.float64)
    return array.reshape(-1, 4)


def iou_array(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    """Row-wise version of :py:func:`iou` for two ``(N, 4)`` arrays."""
    ix = np.clip(
        np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None
    )
    iy = np.clip(
        np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None
    )
    intersection = ix * iy
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - intersection
    result = np.zeros_like(intersection)
    np.divide(intersection, union, out=result, where=union > 0)
    return np.minimum(result, 1.0)


def _centers(boxes: NDArray[np.float64]) -> NDArray[np.float64]:
    return boxes[:, :2] + boxes[:, 2:] / 2


def center_distance_array(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    """Row-wise version of :py:func:`center_distance`."""
    return np.asarray(np.hypot(*(_centers(a) - _centers(b)).T), dtype=np.float64)


def normalized_center_distance_array(
    pred: NDArray[np.float64], gt: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Row-wise version of :py:func:`normalized_center_distance`."""
    if np.any(gt[:, 2:] <= 0):
        raise DegenerateGroundTruth("Ground truth contains boxes with a degenerate extent")
    offset = (_centers(pred) - _centers(gt)) / gt[:, 2:]
    return np.asarray(np.hypot(offset[:, 0], offset[:, 1]), dtype=np.float64)
