"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``."""

import math

import numpy as np


def _iou(a, b):
    acx, acy, aw, ah = a
    bcx, bcy, bw, bh = b
    area_a = aw * ah
    area_b = bw * bh
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(acx + 0.5 * aw, bcx + 0.5 * bw) - max(acx - 0.5 * aw, bcx - 0.5 * bw)
    ih = min(acy + 0.5 * ah, bcy + 0.5 * bh) - max(acy - 0.5 * ah, bcy - 0.5 * bh)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return min(1.0, inter / (area_a + area_b - inter))


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((len(a), len(b)), dtype=np.float64)
    rows_b = [tuple(r) for r in b.tolist()]
    for i, ra in enumerate(a.tolist()):
        for j, rb in enumerate(rows_b):
            out[i, j] = _iou(ra, rb)
    return out


def nms(boxes, scores, threshold):
    rows = [tuple(r) for r in np.asarray(boxes, dtype=np.float64).tolist()]
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    for i in order.tolist():
        if all(_iou(rows[i], rows[k]) <= threshold for k in keep):
            keep.append(i)
    return np.asarray(keep, dtype=np.intp)


def _assign_wide(c):
    n, m = len(c), len(c[0])
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [math.inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = math.inf
            j1 = 0
            row = c[i0 - 1]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
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
    pairs = sorted((p[j] - 1, j - 1) for j in range(1, m + 1) if p[j] != 0)
    rows = np.asarray([r for r, _ in pairs], dtype=np.intp)
    cols = np.asarray([col for _, col in pairs], dtype=np.intp)
    return rows, cols


def linear_sum_assignment(cost):
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if c.size and not np.all(np.isfinite(c)):
        raise ValueError("cost matrix entries must be finite")
    if c.shape[0] == 0 or c.shape[1] == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    if c.shape[0] <= c.shape[1]:
        return _assign_wide(c.tolist())
    cols, rows = _assign_wide(c.T.tolist())
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]
