"""Independent reference implementations used as test oracles.

Written from the definitions in plain Python, without calling the package's
kernels, so agreement with the package is meaningful.
"""

from __future__ import annotations

import itertools
import math


def corners(b):
    cx, cy, w, h = b
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def area_iou(a, b):
    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    if a[2] * a[3] <= 0 or b[2] * b[3] <= 0:
        return 0.0
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return min(1.0, inter / (a[2] * a[3] + b[2] * b[3] - inter))  # IoU <= 1 by definition


def area_giou(a, b):
    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def nms_reference(boxes, scores, threshold):
    """O(n^2) greedy suppression over (-score, index) order."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(area_iou(boxes[i], boxes[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


def brute_force_assignment(cost):
    """Minimum total cost over every injective map from the smaller side."""
    n = len(cost)
    m = len(cost[0]) if n else 0
    best, best_pairs = math.inf, []
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            total = sum(cost[r][c] for r, c in enumerate(cols))
            if total < best:
                best, best_pairs = total, list(enumerate(cols))
    else:
        for rows in itertools.permutations(range(n), m):
            total = sum(cost[r][c] for c, r in enumerate(rows))
            if total < best:
                best, best_pairs = total, sorted((r, c) for c, r in enumerate(rows))
    return best, best_pairs


def focal(p, t, alpha=0.25, gamma=2.0):
    p = min(max(p, 1e-12), 1 - 1e-12)
    ce = -(t * math.log(p) + (1 - t) * math.log(1 - p))
    p_t = p * t + (1 - p) * (1 - t)
    a_t = alpha * t + (1 - alpha) * (1 - t)
    return a_t * ce * (1 - p_t) ** gamma


def match_cost(logit, box, target, w_cls=2.0, w_l1=5.0, w_giou=2.0, alpha=0.25, gamma=2.0):
    p = 1 / (1 + math.exp(-logit))
    pos = alpha * (1 - p) ** gamma * -math.log(p + 1e-8)
    neg = (1 - alpha) * p**gamma * -math.log(1 - p + 1e-8)
    l1 = sum(abs(x - y) for x, y in zip(box, target))
    return w_cls * (pos - neg) + w_l1 * l1 + w_giou * (1 - area_giou(box, target))


def _best_gated_matching(iou, gate):
    """Exhaustive: maximum number of gated pairs, then maximum total IoU."""
    n = len(iou)
    m = len(iou[0]) if n else 0
    best_key, best = (-1, -1.0), []
    choices = [[None] + [j for j in range(m) if iou[i][j] >= gate] for i in range(n)]
    for combo in itertools.product(*choices):
        used = [c for c in combo if c is not None]
        if len(used) != len(set(used)):
            continue
        key = (len(used), sum(iou[i][c] for i, c in enumerate(combo) if c is not None))
        if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] > best_key[1] + 1e-12):
            best_key, best = key, [(i, c) for i, c in enumerate(combo) if c is not None]
    return best


def clear_mot_reference(gt, hyp, gate=0.5):
    """Per-frame CLEAR-MOT with persistence and exhaustive assignment.

    ``gt``/``hyp``: {frame: [(id, box), ...]}. Returns a dict of counts.
    """
    prev, last = {}, {}
    present, tracked = {}, {}
    fp = fn = idsw = num_gt = 0
    for f in sorted(set(gt) | set(hyp)):
        g_rows, h_rows = list(gt.get(f, [])), list(hyp.get(f, []))
        num_gt += len(g_rows)
        for g, _ in g_rows:
            present[g] = present.get(g, 0) + 1
        g_box = dict(g_rows)
        h_box = dict(h_rows)
        matches = {}
        for g, h in prev.items():
            if g in g_box and h in h_box and area_iou(g_box[g], h_box[h]) >= gate:
                matches[g] = h
        free_g = [g for g, _ in g_rows if g not in matches]
        free_h = [h for h, _ in h_rows if h not in matches.values()]
        iou = [[area_iou(g_box[g], h_box[h]) for h in free_h] for g in free_g]
        for i, j in _best_gated_matching(iou, gate):
            matches[free_g[i]] = free_h[j]
        for g, h in matches.items():
            if g in last and last[g] != h:
                idsw += 1
            last[g] = h
            tracked[g] = tracked.get(g, 0) + 1
        fp += len(h_rows) - len(matches)
        fn += len(g_rows) - len(matches)
        prev = matches
    mt = sum(1 for g, n in present.items() if tracked.get(g, 0) >= 0.8 * n)
    ml = sum(1 for g, n in present.items() if tracked.get(g, 0) <= 0.2 * n)
    mota = 1 - (fp + fn + idsw) / num_gt if num_gt else float("nan")
    return {"mota": mota, "fp": fp, "fn": fn, "idsw": idsw, "mt": mt, "ml": ml, "num_gt": num_gt}


def eq7(hungarian, reconstruction, T, S):
    return sum(hungarian[t] + sum(reconstruction[t]) / S for t in range(T)) / T
