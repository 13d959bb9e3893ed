# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled detection kernels; mirrors ``_kernels_py`` operation for operation."""

import numpy as np


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    cdef double inter, union
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] B = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou(A[i, 0], A[i, 1], A[i, 2], A[i, 3],
                                 B[j, 0], B[j, 1], B[j, 2], B[j, 3])
    return out_arr


def nms(boxes, order, double iou_thresh):
    cdef double[:, ::1] X = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef long long[::1] O = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t n = O.shape[0], a, b, i, k, nkeep = 0
    keep_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] keep = keep_arr
    cdef bint suppressed
    with nogil:
        for a in range(n):
            i = O[a]
            suppressed = False
            for b in range(nkeep):
                k = keep[b]
                if _iou(X[i, 0], X[i, 1], X[i, 2], X[i, 3],
                        X[k, 0], X[k, 1], X[k, 2], X[k, 3]) > iou_thresh:
                    suppressed = True
                    break
            if not suppressed:
                keep[nkeep] = i
                nkeep += 1
    return keep_arr[:nkeep].copy()


def greedy_match(pred_boxes, pred_img, gt_boxes, gt_offsets, double threshold):
    cdef double[:, ::1] P = np.ascontiguousarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] G = np.ascontiguousarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cdef long long[::1] img = np.ascontiguousarray(pred_img, dtype=np.int64)
    cdef long long[::1] off = np.ascontiguousarray(gt_offsets, dtype=np.int64)
    cdef Py_ssize_t n = P.shape[0], i, j, best_j
    cdef double best, v
    used_arr = np.zeros(G.shape[0], dtype=np.uint8)
    tp_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] used = used_arr
    cdef unsigned char[::1] tp = tp_arr
    with nogil:
        for i in range(n):
            best = -1.0
            best_j = -1
            for j in range(off[img[i]], off[img[i] + 1]):
                if used[j]:
                    continue
                v = _iou(P[i, 0], P[i, 1], P[i, 2], P[i, 3],
                         G[j, 0], G[j, 1], G[j, 2], G[j, 3])
                if v > best:
                    best = v
                    best_j = j
            if best_j >= 0 and best >= threshold:
                used[best_j] = 1
                tp[i] = 1
    return tp_arr


def all_point_ap(tp, long long n_gt):
    cdef unsigned char[::1] T = np.ascontiguousarray(tp, dtype=np.uint8)
    cdef Py_ssize_t n = T.shape[0], i
    if n == 0 or n_gt <= 0:
        return 0.0
    rec_arr = np.empty(n, dtype=np.float64)
    prec_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] recall = rec_arr
    cdef double[::1] precision = prec_arr
    cdef long long ctp = 0
    cdef double env = 0.0, ap = 0.0, prev = 0.0
    with nogil:
        for i in range(n):
            ctp += T[i]
            recall[i] = <double>ctp / <double>n_gt
            precision[i] = <double>ctp / <double>(i + 1)
        for i in range(n - 1, -1, -1):
            if precision[i] > env:
                env = precision[i]
            precision[i] = env
        for i in range(n):
            if recall[i] > prev:
                ap += (recall[i] - prev) * precision[i]
                prev = recall[i]
    return ap
