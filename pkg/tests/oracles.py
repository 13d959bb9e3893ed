"""Independent reference computations used to freeze expected values.

Nothing here imports the package under test; each oracle follows the textbook
definition with plain loops so it shares no code path with the implementation.
"""

from __future__ import annotations

import math
import struct
from fractions import Fraction

import numpy as np


def naive_weighted_sum(deltas, counts):
    """sum_i n_i * delta_i / sum_i n_i, one scalar at a time."""
    total = 0
    for n in counts:
        total += n
    out = []
    for j in range(len(deltas[0])):
        acc = 0.0
        for d, n in zip(deltas, counts):
            acc += n * d[j]
        out.append(acc / total)
    return out


def fp16_nearest(x: float) -> float:
    """Round-to-nearest-even binary16 by scanning every finite half value."""
    best = best_err = best_bits = None
    for bits in range(0x10000):
        (h,) = struct.unpack("<e", bits.to_bytes(2, "little"))
        if math.isnan(h) or math.isinf(h):
            continue
        err = abs(Fraction(h) - Fraction(x))
        if best is None or err < best_err or (err == best_err and bits % 2 == 0 and best_bits % 2 == 1):
            best, best_err, best_bits = h, err, bits
    return best


def normal_equations(X, y):
    """Least-squares weights (bias last) and the mean squared error at the optimum."""
    A = np.hstack([X, np.ones((X.shape[0], 1))])
    theta = np.linalg.solve(A.T @ A, A.T @ y)
    r = A @ theta - y
    return theta, float(r @ r / len(y))


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def brute_force_ap(images, class_id, t):
    """AP from first principles.

    ``images`` is a list of ``(preds, gts)`` with preds ``(x1, y1, x2, y2, cls, conf)``
    and gts ``(x1, y1, x2, y2, cls)``.  Matching walks predictions by descending
    confidence (stable) and gives each one the best unmatched same-image GT.
    The interpolated curve p(r) = max{precision_j : recall_j >= r} is integrated
    exactly over every interval between consecutive distinct recall values.
    """
    preds = []
    n_gt = 0
    for img, (ps, gs) in enumerate(images):
        n_gt += sum(1 for g in gs if g[4] == class_id)
        preds.extend((p[5], order, img, p) for order, p in enumerate(ps) if p[4] == class_id)
    if n_gt == 0:
        return None
    # stable: original enumeration position breaks ties
    seq = [q for q in sorted(enumerate(preds), key=lambda e: (-e[1][0], e[0]))]
    used = set()
    hits = []
    for _, (_, _, img, p) in seq:
        best_v, best_j = -1.0, None
        for j, g in enumerate(images[img][1]):
            if g[4] != class_id or (img, j) in used:
                continue
            v = box_iou(p, g)
            if v > best_v:
                best_v, best_j = v, j
        if best_j is not None and best_v >= t:
            used.add((img, best_j))
            hits.append(1)
        else:
            hits.append(0)
    points = []
    tp = 0
    for k, h in enumerate(hits, 1):
        tp += h
        points.append((tp / n_gt, tp / k))
    levels = sorted({r for r, _ in points} | {0.0})
    area = 0.0
    for lo, hi in zip(levels, levels[1:]):
        p_interp = max(p for r, p in points if r >= hi)
        area += (hi - lo) * p_interp
    return area


def chi_square(counts):
    total = sum(counts)
    e = total / len(counts)
    return sum((c - e) ** 2 / e for c in counts)
