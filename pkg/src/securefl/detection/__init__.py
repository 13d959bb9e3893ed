"""Object-detection evaluation: IoU, NMS, AP and COCO-style mAP."""

from .boxes import Box, DetectionRecord, corners_to_yolo, yolo_to_corners
from .kernels import BACKEND
from .metrics import (
    COCO_THRESHOLDS,
    MapResult,
    PRCurve,
    average_precision,
    iou,
    mean_ap,
    nms,
    pr_curve,
)

__all__ = [
    "BACKEND",
    "Box",
    "COCO_THRESHOLDS",
    "DetectionRecord",
    "MapResult",
    "PRCurve",
    "average_precision",
    "corners_to_yolo",
    "iou",
    "mean_ap",
    "nms",
    "pr_curve",
    "yolo_to_corners",
]
