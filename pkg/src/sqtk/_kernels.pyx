# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: pairwise IoU, greedy NMS and rectangular linear assignment.

Boxes are center-format ``(cx, cy, w, h)`` float64 rows. The pure-Python
twins live in ``_fallback.py`` and must return identical results.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, isfinite

cnp.import_array()


cdef inline double _iou(double acx, double acy, double aw, double ah,
                        double bcx, double bcy, double bw, double bh) noexcept nogil:
    cdef double area_a = aw * ah
    cdef double area_b = bw * bh
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    cdef double ax0 = acx - 0.5 * aw, ax1 = acx + 0.5 * aw
    cdef double ay0 = acy - 0.5 * ah, ay1 = acy + 0.5 * ah
    cdef double bx0 = bcx - 0.5 * bw, bx1 = bcx + 0.5 * bw
    cdef double by0 = bcy - 0.5 * bh, by1 = bcy + 0.5 * bh
    cdef double iw = (ax1 if ax1 < bx1 else bx1) - (ax0 if ax0 > bx0 else bx0)
    cdef double ih = (ay1 if ay1 < by1 else by1) - (ay0 if ay0 > by0 else by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    cdef double inter = iw * ih
    return min(1.0, inter / (area_a + area_b - inter))


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] res = out
    with nogil:
        for i in range(n):
            for j in range(m):
                res[i, j] = _iou(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                                 b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out


def nms(const double[:, ::1] boxes, const double[::1] scores, double threshold):
    cdef Py_ssize_t n = boxes.shape[0], i, j, k, nkeep = 0
    order_arr = np.argsort(-np.asarray(scores), kind="stable").astype(np.intp)
    cdef Py_ssize_t[::1] order = order_arr
    keep_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] keep = keep_arr
    cdef bint suppressed
    with nogil:
        for k in range(n):
            i = order[k]
            suppressed = False
            for j in range(nkeep):
                if _iou(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                        boxes[keep[j], 0], boxes[keep[j], 1],
                        boxes[keep[j], 2], boxes[keep[j], 3]) > threshold:
                    suppressed = True
                    break
            if not suppressed:
                keep[nkeep] = i
                nkeep += 1
    return keep_arr[:nkeep].copy()


cdef _assign_wide(const double[:, ::1] c):
    # Shortest augmenting path with potentials; requires rows <= cols.
    cdef Py_ssize_t n = c.shape[0], m = c.shape[1]
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(m + 1)
    p_arr = np.zeros(m + 1, dtype=np.intp)
    way_arr = np.zeros(m + 1, dtype=np.intp)
    minv_arr = np.empty(m + 1)
    used_arr = np.empty(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef Py_ssize_t[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(m + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, m + 1):
                    if not used[j]:
                        cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(m + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
    rows = []
    cols = []
    for j in range(1, m + 1):
        if p_arr[j] != 0:
            rows.append(p_arr[j] - 1)
            cols.append(j - 1)
    rows_np = np.asarray(rows, dtype=np.intp)
    cols_np = np.asarray(cols, dtype=np.intp)
    order = np.argsort(rows_np, kind="stable")
    return rows_np[order], cols_np[order]


def linear_sum_assignment(cost):
    c = np.ascontiguousarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if c.size and not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    if c.shape[0] == 0 or c.shape[1] == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    if c.shape[0] <= c.shape[1]:
        return _assign_wide(c)
    cols, rows = _assign_wide(np.ascontiguousarray(c.T))
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]
