"""Bounding boxes, per-image detection records and format conversion."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner form; ``confidence`` is set on predictions only."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    confidence: float | None = None

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def scaled(self, c: float) -> "Box":
        return Box(self.x1 * c, self.y1 * c, self.x2 * c, self.y2 * c, self.class_id, self.confidence)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    predictions: tuple[Box, ...] = field(default_factory=tuple)
    ground_truths: tuple[Box, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "predictions", tuple(self.predictions))
        object.__setattr__(self, "ground_truths", tuple(self.ground_truths))
        if any(p.confidence is None for p in self.predictions):
            raise ValueError(f"{self.image_id}: prediction without confidence")
        if any(g.confidence is not None for g in self.ground_truths):
            raise ValueError(f"{self.image_id}: ground truth with confidence")


def yolo_to_corners(cx, cy, w, h, img_w=1.0, img_h=1.0):
    """Normalized center/size to absolute corner coordinates."""
    return (
        (cx - w / 2.0) * img_w,
        (cy - h / 2.0) * img_h,
        (cx + w / 2.0) * img_w,
        (cy + h / 2.0) * img_h,
    )


def corners_to_yolo(x1, y1, x2, y2, img_w=1.0, img_h=1.0):
    """Absolute top-left/bottom-right corners to normalized center/size."""
    return (
        (x1 + x2) / 2.0 / img_w,
        (y1 + y2) / 2.0 / img_h,
        (x2 - x1) / img_w,
        (y2 - y1) / img_h,
    )
