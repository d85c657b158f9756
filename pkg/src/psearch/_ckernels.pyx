# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of ``_kernels_py``. Semantics must stay identical."""
import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t i,
                        const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
    cdef double area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
    cdef double lx = a[i, 0] if a[i, 0] > b[j, 0] else b[j, 0]
    cdef double ly = a[i, 1] if a[i, 1] > b[j, 1] else b[j, 1]
    cdef double rx = a[i, 2] if a[i, 2] < b[j, 2] else b[j, 2]
    cdef double ry = a[i, 3] if a[i, 3] < b[j, 3] else b[j, 3]
    cdef double w = rx - lx
    cdef double h = ry - ly
    if w < 0:
        w = 0
    if h < 0:
        h = 0
    cdef double inter = w * h
    cdef double union = area_a + area_b - inter
    if union > 0:
        return inter / union
    return 0.0


def box_iou(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = av.shape[0], g = bv.shape[0], i, j
    out = np.empty((n, g), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            for j in range(g):
                ov[i, j] = _iou(av, i, bv, j)
    return out


def nms(boxes, scores, double iou_threshold):
    cdef double[:, ::1] bv = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    s = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    cdef cnp.int64_t[::1] order = np.argsort(-s, kind="stable").astype(np.int64)
    cdef Py_ssize_t n = order.shape[0], pi, pj, i, j, k = 0
    cdef cnp.uint8_t[::1] suppressed = np.zeros(n, dtype=np.uint8)
    keep = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] kv = keep
    with nogil:
        for pi in range(n):
            i = order[pi]
            if suppressed[i]:
                continue
            kv[k] = i
            k += 1
            for pj in range(pi + 1, n):
                j = order[pj]
                if suppressed[j]:
                    continue
                if _iou(bv, i, bv, j) > iou_threshold:
                    suppressed[j] = 1
    return keep[:k]


def local_maxima(m, int radius):
    cdef double[:, ::1] mv = np.ascontiguousarray(m, dtype=np.float64)
    cdef Py_ssize_t h = mv.shape[0], w = mv.shape[1]
    cdef Py_ssize_t i, j, ii, jj, i0, i1, j0, j1, k = 0
    cdef double v, u
    cdef bint is_peak
    out = np.empty((h * w, 2), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    with nogil:
        for i in range(h):
            for j in range(w):
                v = mv[i, j]
                if v == 0.0:
                    continue
                is_peak = True
                if radius > 0:
                    i0 = i - radius if i - radius > 0 else 0
                    i1 = i + radius + 1 if i + radius + 1 < h else h
                    j0 = j - radius if j - radius > 0 else 0
                    j1 = j + radius + 1 if j + radius + 1 < w else w
                    for ii in range(i0, i1):
                        for jj in range(j0, j1):
                            if ii == i and jj == j:
                                continue
                            u = mv[ii, jj]
                            if u > v or (u == v and (ii < i or (ii == i and jj < j))):
                                is_peak = False
                                break
                        if not is_peak:
                            break
                if is_peak:
                    ov[k, 0] = i
                    ov[k, 1] = j
                    k += 1
    return out[:k]


def peak_stds(m, centers, int radius, double delta):
    cdef double[:, ::1] mv = np.ascontiguousarray(m, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] cv = np.ascontiguousarray(centers, dtype=np.int64).reshape(-1, 2)
    cdef Py_ssize_t h = mv.shape[0], w = mv.shape[1], n = cv.shape[0]
    cdef Py_ssize_t k, ii, jj, cy, cx, i0, i1, j0, j1
    cdef double sx, sy, d, val
    out = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for k in range(n):
            cy = cv[k, 0]
            cx = cv[k, 1]
            i0 = cy - radius if cy - radius > 0 else 0
            i1 = cy + radius + 1 if cy + radius + 1 < h else h
            j0 = cx - radius if cx - radius > 0 else 0
            j1 = cx + radius + 1 if cx + radius + 1 < w else w
            sx = 0.0
            sy = 0.0
            for ii in range(i0, i1):
                for jj in range(j0, j1):
                    val = mv[ii, jj]
                    d = <double>(jj - cx)
                    sx += d * d * val
                    d = <double>(ii - cy)
                    sy += d * d * val
            sx = sqrt(sx)
            sy = sqrt(sy)
            ov[k, 0] = sx if sx > delta else delta
            ov[k, 1] = sy if sy > delta else delta
    return out


def greedy_match(pred_boxes, gt_boxes, double iou_threshold, gt_ignore=None):
    cdef double[:, ::1] pv = np.ascontiguousarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    cdef double[:, ::1] gv = np.ascontiguousarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = pv.shape[0], g = gv.shape[0], p, q
    if gt_ignore is None:
        gt_ignore = np.zeros(g, dtype=np.uint8)
    cdef cnp.uint8_t[::1] ign = np.ascontiguousarray(gt_ignore, dtype=np.uint8)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or g == 0:
        return matched
    cdef cnp.int64_t[::1] mv = matched
    cdef cnp.uint8_t[::1] taken = np.zeros(g, dtype=np.uint8)
    cdef Py_ssize_t best
    cdef double best_iou, v
    cdef int pass_ignored
    with nogil:
        for p in range(n):
            best = -1
            best_iou = iou_threshold
            for pass_ignored in range(2):
                for q in range(g):
                    if taken[q] or ign[q] != pass_ignored:
                        continue
                    v = _iou(pv, p, gv, q)
                    if v >= best_iou and (best < 0 or v > best_iou):
                        best = q
                        best_iou = v
                if best >= 0:
                    break
            if best >= 0:
                taken[best] = 1
                mv[p] = best
    return matched
