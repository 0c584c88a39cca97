"""Axis-aligned box arithmetic: IoU and area-ratio computations.

Coordinates are absolute pixels with a top-left origin, x rightward and
y downward. Areas are continuous, (x2 - x1) * (y2 - y1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class InvalidBoxError(ValueError):
    """Raised when box coordinates violate the box invariants."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned bounding box [x1, y1, x2, y2] in pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite coordinates: {coords}")
        if any(c < 0 for c in coords):
            raise InvalidBoxError(f"negative coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"degenerate box (needs x1 < x2 and y1 < y2): {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class ImageDims:
    """Image width and height in pixels."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be >= 1: {self.width}x{self.height}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = a.area + b.area - inter
    return inter / union


def area_ratio(b: Box, dims: ImageDims, *, lenient: bool = False) -> float:
    """Ratio of box area to total image area, clamped to [0, 1].

    In strict mode (default) a box exceeding the image bounds is rejected;
    with lenient=True the box is clipped to the image first.
    """
    if b.x2 > dims.width or b.y2 > dims.height:
        if not lenient:
            raise InvalidBoxError(
                f"box {b.as_list()} exceeds image bounds {dims.width}x{dims.height}"
            )
        b = Box(
            min(b.x1, dims.width - 1e-9),
            min(b.y1, dims.height - 1e-9),
            min(b.x2, dims.width),
            min(b.y2, dims.height),
        )
    ratio = b.area / (dims.width * dims.height)
    return min(1.0, max(0.0, ratio))
