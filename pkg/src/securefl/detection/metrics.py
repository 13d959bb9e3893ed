"""IoU, non-maximum suppression, average precision and mAP."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import EmptyRecords, NoGroundTruth
from . import kernels
from ._kernels_py import _iou
from .boxes import Box, DetectionRecord

# 0.50, 0.55, ..., 0.95
COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

NMS_IOU_THRESH = 0.65
NMS_CONF_THRESH = 0.001


def iou(a: Box, b: Box) -> float:
    return _iou(a.x1, a.y1, a.x2, a.y2, b.x1, b.y1, b.x2, b.y2)


def _corners(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.corners for b in boxes], dtype=np.float64)


def _by_confidence(boxes: Sequence[Box]) -> list[int]:
    conf = np.array([b.confidence for b in boxes], dtype=np.float64)
    return np.argsort(-conf, kind="stable").tolist()


def nms(preds: Sequence[Box], iou_thresh: float = NMS_IOU_THRESH,
        conf_thresh: float = NMS_CONF_THRESH, class_agnostic: bool = False) -> list[Box]:
    """Greedy per-class suppression; the result is sorted by confidence.

    Predictions under ``conf_thresh`` are discarded first.  Within each class
    (or globally when ``class_agnostic``) the highest-scoring box is kept and
    any box overlapping a kept box with IoU above ``iou_thresh`` is dropped.
    Equal confidences keep input order.
    """
    cand = [p for p in preds if p.confidence >= conf_thresh]
    if not cand:
        return []
    order = _by_confidence(cand)
    boxes = _corners(cand)
    if class_agnostic:
        kept = set(kernels.nms(boxes, np.array(order, dtype=np.int64), iou_thresh).tolist())
    else:
        kept = set()
        for k in sorted({p.class_id for p in cand}):
            sub = np.array([i for i in order if cand[i].class_id == k], dtype=np.int64)
            kept.update(kernels.nms(boxes, sub, iou_thresh).tolist())
    return [cand[i] for i in order if i in kept]


@dataclass(frozen=True)
class PRCurve:
    class_id: int
    iou_threshold: float
    recall: tuple[float, ...]
    precision: tuple[float, ...]


class _ClassView:
    """Predictions of one class sorted by confidence plus image-grouped ground truths."""

    def __init__(self, records: Sequence[DetectionRecord], class_id: int):
        offsets = [0]
        gt = []
        items = []
        for r_idx, rec in enumerate(records):
            gt.extend(g.corners for g in rec.ground_truths if g.class_id == class_id)
            offsets.append(len(gt))
            items.extend((p, r_idx) for p in rec.predictions if p.class_id == class_id)
        conf = np.array([p.confidence for p, _ in items], dtype=np.float64)
        order = np.argsort(-conf, kind="stable")
        self.n_gt = len(gt)
        self.gt_boxes = np.array(gt, dtype=np.float64).reshape(-1, 4)
        self.gt_offsets = np.array(offsets, dtype=np.int64)
        self.pred_boxes = np.array([items[i][0].corners for i in order], dtype=np.float64).reshape(-1, 4)
        self.pred_img = np.array([items[i][1] for i in order], dtype=np.int64)

    def tp_flags(self, threshold: float) -> np.ndarray:
        return kernels.greedy_match(self.pred_boxes, self.pred_img, self.gt_boxes,
                                    self.gt_offsets, threshold)

    def ap(self, threshold: float) -> float:
        return float(kernels.all_point_ap(self.tp_flags(threshold), self.n_gt))


def _check_threshold(t: float) -> None:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {t}")


def pr_curve(records: Sequence[DetectionRecord], class_id: int, threshold: float) -> PRCurve:
    _check_threshold(threshold)
    view = _ClassView(records, class_id)
    if view.n_gt == 0:
        raise NoGroundTruth(f"class {class_id} has no ground truth")
    tp = np.cumsum(view.tp_flags(threshold), dtype=np.int64)
    seen = np.arange(1, tp.size + 1)
    return PRCurve(class_id, threshold, tuple((tp / view.n_gt).tolist()), tuple((tp / seen).tolist()))


def average_precision(records: Sequence[DetectionRecord], class_id: int, threshold: float) -> float:
    """All-point interpolated AP of one class at one IoU threshold.

    Raises:
        NoGroundTruth: the class has no ground-truth box in ``records``.
    """
    _check_threshold(threshold)
    view = _ClassView(records, class_id)
    if view.n_gt == 0:
        raise NoGroundTruth(f"class {class_id} has no ground truth")
    return view.ap(threshold)


@dataclass
class MapResult:
    per_threshold: dict[float, float]
    overall: float
    ap: dict[int, dict[float, float]] = field(default_factory=dict)
    excluded_classes: list[int] = field(default_factory=list)

    @property
    def map50(self) -> float:
        return self.per_threshold.get(0.5, float("nan"))

    def to_dict(self) -> dict:
        return {
            "mAP": self.overall,
            "mAP_per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "ap_per_class": {str(k): {f"{t:.2f}": v for t, v in d.items()} for k, d in self.ap.items()},
            "excluded_classes": self.excluded_classes,
        }


def mean_ap(records: Sequence[DetectionRecord], classes: Iterable[int] | None = None,
            thresholds: Sequence[float] = COCO_THRESHOLDS) -> MapResult:
    """Mean AP over classes for each threshold, and the mean over thresholds.

    Classes without ground truth are excluded from the class mean and listed
    in ``excluded_classes``.
    """
    records = list(records)
    if not records:
        raise EmptyRecords("no detection records to evaluate")
    if classes is None:
        classes = sorted({b.class_id for r in records for b in (*r.ground_truths, *r.predictions)})
    classes = list(classes)
    if not classes:
        raise ValueError("class set is empty")
    for t in thresholds:
        _check_threshold(t)
    ap: dict[int, dict[float, float]] = {}
    excluded = []
    for k in classes:
        view = _ClassView(records, k)
        if view.n_gt == 0:
            excluded.append(k)
            continue
        ap[k] = {t: view.ap(t) for t in thresholds}
    if not ap:
        raise NoGroundTruth("no class in the evaluated set has ground truth")
    per_t = {t: float(sum(ap[k][t] for k in ap) / len(ap)) for t in thresholds}
    overall = float(sum(per_t.values()) / len(per_t))
    return MapResult(per_t, overall, ap, excluded)
