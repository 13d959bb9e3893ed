"""Pure-Python detection kernels.

Reference implementation and import-time fallback for the compiled
``_kernels`` extension.  Both modules expose the same four functions and must
stay operation-for-operation identical so that results agree bitwise.
"""

import numpy as np


def _iou(ax1, ay1, ax2, ay2, bx1, by1, bx2, by2):
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a, b):
    """Pairwise IoU of corner-form boxes ``a`` (n, 4) and ``b`` (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4).tolist()
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4).tolist()
    out = np.zeros((len(a), len(b)), dtype=np.float64)
    for i, p in enumerate(a):
        for j, q in enumerate(b):
            out[i, j] = _iou(p[0], p[1], p[2], p[3], q[0], q[1], q[2], q[3])
    return out


def nms(boxes, order, iou_thresh):
    """Greedy suppression over ``boxes`` visited in ``order``.

    ``order`` lists box indices by descending score.  A box is dropped when its
    IoU with any already kept box exceeds ``iou_thresh``.  Returns kept indices
    in visiting order.
    """
    bx = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).tolist()
    keep = []
    for i in np.asarray(order, dtype=np.int64).tolist():
        p = bx[i]
        suppressed = False
        for k in keep:
            q = bx[k]
            if _iou(p[0], p[1], p[2], p[3], q[0], q[1], q[2], q[3]) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def greedy_match(pred_boxes, pred_img, gt_boxes, gt_offsets, threshold):
    """True-positive flags for predictions already sorted by confidence.

    Ground truths are grouped by image: those of image ``k`` occupy rows
    ``gt_offsets[k]:gt_offsets[k + 1]`` of ``gt_boxes``.  Each prediction takes
    the unmatched ground truth of its image with the highest IoU (first one on
    ties) and counts as a true positive when that IoU reaches ``threshold``.
    """
    pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4).tolist()
    gb = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4).tolist()
    img = np.asarray(pred_img, dtype=np.int64).tolist()
    off = np.asarray(gt_offsets, dtype=np.int64).tolist()
    used = [False] * len(gb)
    tp = np.zeros(len(pb), dtype=np.uint8)
    for i, p in enumerate(pb):
        best = -1.0
        best_j = -1
        for j in range(off[img[i]], off[img[i] + 1]):
            if used[j]:
                continue
            q = gb[j]
            v = _iou(p[0], p[1], p[2], p[3], q[0], q[1], q[2], q[3])
            if v > best:
                best = v
                best_j = j
        if best_j >= 0 and best >= threshold:
            used[best_j] = True
            tp[i] = 1
    return tp


def all_point_ap(tp, n_gt):
    """Area under the precision envelope of the cumulative PR curve."""
    flags = np.asarray(tp, dtype=np.uint8).tolist()
    n = len(flags)
    if n == 0 or n_gt <= 0:
        return 0.0
    recall = [0.0] * n
    precision = [0.0] * n
    ctp = 0
    for i, f in enumerate(flags):
        ctp += f
        recall[i] = ctp / n_gt
        precision[i] = ctp / (i + 1)
    env = 0.0
    for i in range(n - 1, -1, -1):
        if precision[i] > env:
            env = precision[i]
        precision[i] = env
    ap = 0.0
    prev = 0.0
    for i in range(n):
        if recall[i] > prev:
            ap += (recall[i] - prev) * precision[i]
            prev = recall[i]
    return ap
