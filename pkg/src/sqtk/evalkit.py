"""CLEAR-MOT, identity and detection metrics, and the GT-boxes-as-queries probe."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from . import kernels
from .geometry import iou_matrix, nms
from .querybank import build_detection_queries, build_group_attention_mask, build_tracking_queries
from .scenegen import crop_template

# frame -> list of (id, box)
FrameTable = Mapping[int, Sequence[tuple[int, Sequence[float]]]]

MT_RATIO = 0.8
ML_RATIO = 0.2
_INFEASIBLE = 1e6


@dataclass
class ClearMot:
    mota: float
    fp: int
    fn: int
    idsw: int
    mt: int
    ml: int
    num_gt: int
    num_matches: int
    num_trajectories: int


@dataclass
class MetricsReport:
    MOTA: float | None = None
    IDF1: float | None = None
    MT: int = 0
    ML: int = 0
    FP: int = 0
    FN: int = 0
    IDSw: int = 0
    mAP50: float | None = None
    mAR: float | None = None
    num_gt: int = 0
    num_trajectories: int = 0
    per_sequence: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return json_safe(asdict(self))


def json_safe(x):
    if isinstance(x, dict):
        return {k: json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, np.generic):
        return json_safe(x.item())
    return x


def _frame_arrays(rows):
    ids = [int(i) for i, _ in rows]
    boxes = np.asarray([list(b) for _, b in rows], dtype=np.float64).reshape(-1, 4)
    return ids, boxes


def _check_unique(table: FrameTable, what: str) -> None:
    for frame, rows in table.items():
        ids = [int(i) for i, _ in rows]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate {what} ids in frame {frame}")


def gated_assignment(iou: np.ndarray, gate: float) -> list[tuple[int, int]]:
    """Maximum-cardinality matching among pairs with IoU >= gate, ties broken by total IoU."""
    if iou.size == 0:
        return []
    cost = np.where(iou >= gate, 1.0 - iou, _INFEASIBLE)
    rows, cols = kernels.linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= gate]


def clear_mot(gt: FrameTable, hyp: FrameTable, iou_gate: float = 0.5, assign=gated_assignment) -> ClearMot:
    """CLEAR-MOT counts over frame-indexed ``{frame: [(id, box), ...]}`` tables.

    Matches from the previous frame are kept while still inside the gate; the
    remaining objects are assigned optimally. An identity switch is charged
    when a GT track's hypothesis differs from its last matched one.
    """
    _check_unique(hyp, "hypothesis")
    _check_unique(gt, "ground-truth")
    frames = sorted(set(gt) | set(hyp))
    prev: dict[int, int] = {}
    last: dict[int, int] = {}
    present: dict[int, int] = defaultdict(int)
    tracked: dict[int, int] = defaultdict(int)
    fp = fn = idsw = num_gt = num_matches = 0
    for f in frames:
        g_ids, g_boxes = _frame_arrays(gt.get(f, []))
        h_ids, h_boxes = _frame_arrays(hyp.get(f, []))
        num_gt += len(g_ids)
        for g in g_ids:
            present[g] += 1
        iou = iou_matrix(g_boxes, h_boxes)
        g_pos = {g: i for i, g in enumerate(g_ids)}
        h_pos = {h: j for j, h in enumerate(h_ids)}
        matches: dict[int, int] = {}
        for g, h in prev.items():
            if g in g_pos and h in h_pos and iou[g_pos[g], h_pos[h]] >= iou_gate:
                matches[g] = h
        free_g = [i for i, g in enumerate(g_ids) if g not in matches]
        used_h = set(matches.values())
        free_h = [j for j, h in enumerate(h_ids) if h not in used_h]
        if free_g and free_h:
            sub = iou[np.ix_(free_g, free_h)]
            for r, c in assign(sub, iou_gate):
                matches[g_ids[free_g[r]]] = h_ids[free_h[c]]
        for g, h in matches.items():
            if g in last and last[g] != h:
                idsw += 1
            last[g] = h
            tracked[g] += 1
        num_matches += len(matches)
        fp += len(h_ids) - len(matches)
        fn += len(g_ids) - len(matches)
        prev = matches
    mt = sum(1 for g, n in present.items() if tracked[g] >= MT_RATIO * n)
    ml = sum(1 for g, n in present.items() if tracked[g] <= ML_RATIO * n)
    mota = 1.0 - (fp + fn + idsw) / num_gt if num_gt else math.nan
    return ClearMot(mota, fp, fn, idsw, mt, ml, num_gt, num_matches, len(present))


def idf1(gt: FrameTable, hyp: FrameTable, iou_gate: float = 0.5) -> float:
    """Identity F1 from a global one-to-one matching of trajectories."""
    _check_unique(hyp, "hypothesis")
    total_gt = sum(len(v) for v in gt.values())
    total_hyp = sum(len(v) for v in hyp.values())
    if total_gt + total_hyp == 0:
        return 1.0
    g_index: dict[int, int] = {}
    h_index: dict[int, int] = {}
    for rows in gt.values():
        for i, _ in rows:
            g_index.setdefault(int(i), len(g_index))
    for rows in hyp.values():
        for i, _ in rows:
            h_index.setdefault(int(i), len(h_index))
    overlap = np.zeros((len(g_index), len(h_index)))
    for f in set(gt) & set(hyp):
        g_ids, g_boxes = _frame_arrays(gt[f])
        h_ids, h_boxes = _frame_arrays(hyp[f])
        ok = iou_matrix(g_boxes, h_boxes) >= iou_gate
        for r, c in zip(*np.nonzero(ok)):
            overlap[g_index[g_ids[r]], h_index[h_ids[c]]] += 1
    idtp = 0.0
    if overlap.size:
        rows, cols = kernels.linear_sum_assignment(-overlap)
        idtp = float(overlap[rows, cols].sum())
    return 2 * idtp / (total_gt + total_hyp)


def pr_curve(gt: Sequence, detections: Sequence, iou_gate: float = 0.5, max_dets: int = 100):
    """Monotone precision envelope and recall over score-ranked detections.

    ``gt[i]`` is an (n, 4) box array; ``detections[i]`` is ``(boxes, scores)``.
    Single foreground class. Returns ``(precision, recall, num_gt)``.
    """
    if len(gt) != len(detections):
        raise ValueError("gt and detections must cover the same images")
    num_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gt)
    records = []  # (score, image, det index, is_tp)
    for img, (g, (boxes, scores)) in enumerate(zip(gt, detections)):
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        order = np.argsort(-scores, kind="stable")[:max_dets]
        iou = iou_matrix(boxes[order], g)
        taken = np.zeros(len(g), dtype=bool)
        for rank, d in enumerate(order):
            tp = False
            if len(g):
                cand = np.where(taken, -1.0, iou[rank])
                best = int(np.argmax(cand))
                if cand[best] >= iou_gate:
                    taken[best] = True
                    tp = True
            records.append((float(scores[d]), img, rank, tp))
    if num_gt == 0 or not records:
        return np.zeros(0), np.zeros(0), num_gt
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    tp = np.cumsum([r[3] for r in records])
    fp = np.cumsum([not r[3] for r in records])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    return precision, recall, num_gt


def detection_pr(gt: Sequence, detections: Sequence, iou_gate: float = 0.5, max_dets: int = 100):
    """101-point interpolated AP at ``iou_gate`` and recall at ``max_dets`` per image."""
    precision, recall, num_gt = pr_curve(gt, detections, iou_gate, max_dets)
    if num_gt == 0:
        return math.nan, math.nan
    if len(recall) == 0:
        return 0.0, 0.0
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += precision[idx] if idx < len(precision) else 0.0
    return ap / 101, float(recall[-1])


# -- model-based evaluation -------------------------------------------------


@dataclass
class ProbeItem:
    image: np.ndarray
    gt_boxes: np.ndarray  # (M, 4) boxes of the template category
    template: np.ndarray


@torch.no_grad()
def gt_query_probe(model, items: Iterable[ProbeItem]):
    """Feed ground-truth boxes as tracking-query boxes.

    For every GT box the scale candidate with the highest IoU against it is
    selected; returns the mean positive probability and mean IoU of those.
    """
    model.eval()
    confs, ious = [], []
    for item in items:
        gt = np.asarray(item.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if len(gt) == 0:
            continue
        pooled = model.template_features([item.template])[0]
        memory = model.encode(model.extract_features(item.image))
        qs = build_tracking_queries(pooled, gt, group=0)
        out = model.decode(qs.content[None], qs.boxes[None], memory, qs.attention_mask())
        s, m = pooled.shape[0], len(gt)
        probs = out.logits[-1, 0].sigmoid().double().numpy().reshape(s, m)
        boxes = out.boxes[-1, 0].double().numpy().reshape(s, m, 4)
        for j in range(m):
            cand = iou_matrix(boxes[:, j], gt[j : j + 1])[:, 0]
            best = int(np.argmax(cand))
            confs.append(probs[best, j])
            ious.append(cand[best])
    if not confs:
        raise ValueError("gt_query_probe needs at least one ground-truth box")
    return float(np.mean(confs)), float(np.mean(ious))


def probe_items_from_sequences(sequences, rng: np.random.Generator, long_side: int = 32,
                               template_index: int | None = None) -> list[ProbeItem]:
    """One template per sequence (from its first frame); every frame becomes an item."""
    items = []
    for frames in sequences:
        first_image, first_anns = frames[0]
        if not first_anns:
            continue
        k = template_index if template_index is not None else int(rng.integers(0, len(first_anns)))
        ref = first_anns[k]
        template = crop_template(first_image, ref.box, long_side)
        for image, anns in frames:
            boxes = [a.box for a in anns if a.category_id == ref.category_id]
            if boxes:
                items.append(ProbeItem(image, np.asarray(boxes), template))
    return items


DETECTION_NMS = 0.5


@torch.no_grad()
def evaluate_detection(model, scenes: Sequence, seed: int = 0, long_side: int = 32, max_dets: int = 100,
                       nms_threshold: float | None = DETECTION_NMS):
    """mAP@0.5 / mAR over every (scene, category present) pair."""
    gts, dets = detection_outputs(model, scenes, seed, long_side, nms_threshold)
    return detection_pr(gts, dets, 0.5, max_dets)


@torch.no_grad()
def detection_outputs(model, scenes: Sequence, seed: int = 0, long_side: int = 32,
                      nms_threshold: float | None = DETECTION_NMS):
    """Per (scene, category) pair: GT boxes of the category and final-layer detections.

    The template for a pair is cropped from a different scene containing the
    category; all templates of a scene run as masked groups of one forward.
    Detections pass through the same NMS as the tracker's detection branch;
    ``nms_threshold=None`` returns the raw query outputs.
    """
    model.eval()
    rng = np.random.default_rng(seed)
    by_cat: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for i, (_, anns) in enumerate(scenes):
        for j, a in enumerate(anns):
            by_cat[a.category_id].append((i, j))
    learned = model.learned_boxes()
    n = model.cfg.num_queries
    gts, dets = [], []
    for i, (image, anns) in enumerate(scenes):
        cats = sorted({a.category_id for a in anns})
        if not cats:
            continue
        templates = []
        for c in cats:
            pool = [p for p in by_cat[c] if p[0] != i] or by_cat[c]
            si, oj = pool[int(rng.integers(0, len(pool)))]
            templates.append(crop_template(scenes[si][0], scenes[si][1][oj].box, long_side))
        pooled = model.template_features(templates)
        memory = model.encode(model.extract_features(image))
        parts = [build_detection_queries(pooled[t], learned, group=t) for t in range(len(cats))]
        content = torch.cat([p.content for p in parts])[None]
        boxes = torch.cat([p.boxes for p in parts])[None]
        mask = build_group_attention_mask([n] * len(cats))
        out = model.decode(content, boxes, memory, mask)
        probs = out.logits[-1, 0].sigmoid().double().numpy()
        pred = out.boxes[-1, 0].double().numpy()
        for t, c in enumerate(cats):
            sl = slice(t * n, (t + 1) * n)
            gts.append(np.asarray([a.box for a in anns if a.category_id == c]))
            b, p = pred[sl], probs[sl]
            if nms_threshold is not None:
                keep = nms(b, p, nms_threshold)
                b, p = b[keep], p[keep]
            dets.append((b, p))
    return gts, dets


def evaluate_tracking(gt_sequences: Mapping[str, FrameTable], hyp_sequences: Mapping[str, FrameTable],
                      hyp_scores: Mapping[str, Mapping[int, Sequence[float]]] | None = None,
                      iou_gate: float = 0.5) -> MetricsReport:
    """Aggregate CLEAR-MOT / IDF1 (and detection AP from tracker scores) over sequences."""
    report = MetricsReport()
    idtp_num = idtp_den = 0.0
    gts_all, dets_all = [], []
    for name in sorted(gt_sequences):
        gt = gt_sequences[name]
        hyp = hyp_sequences.get(name, {})
        cm = clear_mot(gt, hyp, iou_gate)
        f1 = idf1(gt, hyp, iou_gate)
        n_gt = sum(len(v) for v in gt.values())
        n_hyp = sum(len(v) for v in hyp.values())
        idtp_num += f1 * (n_gt + n_hyp)
        idtp_den += n_gt + n_hyp
        report.FP += cm.fp
        report.FN += cm.fn
        report.IDSw += cm.idsw
        report.MT += cm.mt
        report.ML += cm.ml
        report.num_gt += cm.num_gt
        report.num_trajectories += cm.num_trajectories
        report.per_sequence[name] = {"MOTA": cm.mota, "IDF1": f1, "FP": cm.fp, "FN": cm.fn, "IDSw": cm.idsw,
                                     "MT": cm.mt, "ML": cm.ml, "num_gt": cm.num_gt}
        if hyp_scores is not None:
            scores = hyp_scores.get(name, {})
            for f in sorted(set(gt) | set(hyp)):
                gts_all.append(np.asarray([b for _, b in gt.get(f, [])]).reshape(-1, 4))
                rows = hyp.get(f, [])
                dets_all.append((np.asarray([b for _, b in rows]).reshape(-1, 4),
                                 np.asarray(scores.get(f, [1.0] * len(rows)), dtype=np.float64)))
    if report.num_gt:
        report.MOTA = 1.0 - (report.FP + report.FN + report.IDSw) / report.num_gt
    report.IDF1 = idtp_num / idtp_den if idtp_den else None
    if hyp_scores is not None and gts_all:
        report.mAP50, report.mAR = detection_pr(gts_all, dets_all)
    return report
