"""Axis-aligned boxes, detections, and ground-truth records.

Boxes use inclusive-exclusive right/bottom edges ((x1, y1, x2, y2) with
x1 < x2, y1 < y2), so area is (x2 - x1) * (y2 - y1) with no +1 terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple


class BoundingBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def validate(self) -> "BoundingBox":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")
        return self


@dataclass(frozen=True)
class Detection:
    frame: int
    bbox: BoundingBox
    score: float

    def __post_init__(self):
        object.__setattr__(self, "bbox", BoundingBox(*self.bbox).validate())
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    frame: int
    bbox: BoundingBox

    def __post_init__(self):
        object.__setattr__(self, "bbox", BoundingBox(*self.bbox).validate())
