"""Dynamic matching training: template sampling, relabeling, set loss, training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .geometry import giou_t, pairwise_giou_t
from .model import SiameseDETR
from .querybank import (
    PAD,
    NoiseConfig,
    QuerySet,
    build_denoising_queries,
    build_detection_queries,
)
from .scenegen import Annotation, crop_template

log = logging.getLogger(__name__)


class EmptyImageError(ValueError):
    """Raised for images without annotations; the training loop skips them."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass
class RelabeledAnnotationSet:
    boxes: np.ndarray  # (K, 4)
    labels: np.ndarray  # (K,) in {0, 1}
    template_category: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int]


@dataclass
class LossBreakdown:
    total: torch.Tensor
    hungarian_per_template: list[torch.Tensor]
    reconstruction_per_template_scale: list[list[torch.Tensor]]
    components: dict[str, torch.Tensor] = field(default_factory=dict)


def sample_template_categories(annotations: Sequence[Annotation], T: int, rng: np.random.Generator) -> list[int]:
    """Draw ``T`` template categories uniformly from those present in the image.

    Distinct categories are drawn without replacement while enough exist;
    otherwise with replacement.
    """
    if not annotations:
        raise EmptyImageError("image has no annotations")
    present = sorted({a.category_id for a in annotations})
    replace = len(present) < T
    picks = rng.choice(len(present), size=T, replace=replace)
    return [present[int(i)] for i in picks]


def relabel_annotations(annotations: Sequence[Annotation], template_category: int) -> RelabeledAnnotationSet:
    boxes = np.asarray([a.box for a in annotations], dtype=np.float64).reshape(-1, 4)
    labels = np.asarray([int(a.category_id == template_category) for a in annotations], dtype=np.int64)
    return RelabeledAnnotationSet(boxes, labels, template_category)


def focal_terms(logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    p = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * ce * (1 - p_t) ** gamma


def matching_cost(logits, boxes, target_boxes, weights: LossWeights) -> np.ndarray:
    """(Q, P) cost: focal class cost + weighted L1 + weighted (1 - GIoU)."""
    with torch.no_grad():
        logits = torch.as_tensor(logits, dtype=torch.float64)
        boxes = torch.as_tensor(boxes, dtype=torch.float64)
        tb = torch.as_tensor(target_boxes, dtype=torch.float64).reshape(-1, 4)
        p = logits.sigmoid()
        a, g = weights.alpha, weights.gamma
        neg = (1 - a) * p**g * -(1 - p + 1e-8).log()
        pos = a * (1 - p) ** g * -(p + 1e-8).log()
        cls = (pos - neg)[:, None]
        l1 = torch.cdist(boxes, tb, p=1)
        cost = weights.cls * cls + weights.l1 * l1 + weights.giou * (1 - pairwise_giou_t(boxes, tb))
    return cost.numpy()


def hungarian_match(logits, boxes, targets: RelabeledAnnotationSet, weights: LossWeights | None = None) -> MatchResult:
    """Exact minimum-cost one-to-one assignment of positive targets to queries."""
    weights = weights or LossWeights()
    q = len(logits)
    pos = targets.positives
    if len(pos) > q:
        raise ValueError(f"{len(pos)} positive targets exceed {q} queries")
    if len(pos) == 0:
        return MatchResult([], list(range(q)))
    cost = matching_cost(logits, boxes, targets.boxes[pos], weights)
    rows, cols = kernels.linear_sum_assignment(cost)
    pairs = sorted((int(r), int(pos[c])) for r, c in zip(rows, cols))
    matched = {r for r, _ in pairs}
    return MatchResult(pairs, [i for i in range(q) if i not in matched])


def _as_layers(logits, boxes):
    if logits.dim() == 1:
        return logits[None], boxes[None]
    return logits, boxes


def hungarian_loss(logits: torch.Tensor, boxes: torch.Tensor, targets: RelabeledAnnotationSet,
                   matches: MatchResult | Sequence[MatchResult], weights: LossWeights | None = None):
    """Set loss for one query group, summed over decoder layers.

    ``logits`` (L, Q) / ``boxes`` (L, Q, 4), or a single layer without the
    leading axis. ``matches`` holds one MatchResult per layer. Returns weighted
    ``cls``, ``l1``, ``giou`` terms and their ``total``.
    """
    weights = weights or LossWeights()
    logits, boxes = _as_layers(logits, boxes)
    if isinstance(matches, MatchResult):
        matches = [matches] * logits.shape[0]
    norm = max(1, len(targets.positives))
    tboxes = torch.as_tensor(targets.boxes, dtype=boxes.dtype)
    zero = logits.sum() * 0
    cls = l1 = gio = zero
    for layer, match in enumerate(matches):
        cls_target = torch.zeros_like(logits[layer])
        if match.pairs:
            qi = torch.tensor([p[0] for p in match.pairs])
            ti = torch.tensor([p[1] for p in match.pairs])
            cls_target[qi] = 1.0
            pred, gt = boxes[layer, qi], tboxes[ti]
            l1 = l1 + (pred - gt).abs().sum() / norm
            gio = gio + (1 - giou_t(pred, gt)).sum() / norm
        cls = cls + focal_terms(logits[layer], cls_target, weights.alpha, weights.gamma).sum() / norm
    out = {"cls": weights.cls * cls, "l1": weights.l1 * l1, "giou": weights.giou * gio}
    out["total"] = out["cls"] + out["l1"] + out["giou"]
    return out


def reconstruction_loss(logits: torch.Tensor, boxes: torch.Tensor, labels: torch.Tensor,
                        clean_boxes: torch.Tensor, num_scales: int, weights: LossWeights | None = None):
    """Per-scale denoising loss with fixed query/target pairing.

    Queries are laid out scale-major (``s * K + k``). Returns a list of
    ``num_scales`` dicts with weighted ``cls``, ``l1``, ``giou`` and ``total``.
    """
    weights = weights or LossWeights()
    logits, boxes = _as_layers(logits, boxes)
    n = logits.shape[-1]
    if n == 0:
        z = logits.sum() * 0
        return [{"cls": z, "l1": z, "giou": z, "total": z} for _ in range(num_scales)]
    if n % num_scales:
        raise ValueError(f"{n} denoising queries not divisible by {num_scales} scales")
    k = n // num_scales
    labels = labels.to(logits.dtype)
    clean_boxes = clean_boxes.to(boxes.dtype)
    out = []
    for s in range(num_scales):
        sl = slice(s * k, (s + 1) * k)
        lab = labels[sl]
        pos = lab > 0.5
        norm = max(1, int(pos.sum()))
        cls = focal_terms(logits[:, sl], lab.expand_as(logits[:, sl]), weights.alpha, weights.gamma).sum() / norm
        pred = boxes[:, sl][:, pos]
        gt = clean_boxes[sl][pos].expand_as(pred)
        l1 = (pred - gt).abs().sum() / norm
        gio = (1 - giou_t(pred, gt)).sum() / norm if pred.numel() else logits.sum() * 0
        term = {"cls": weights.cls * cls, "l1": weights.l1 * l1, "giou": weights.giou * gio}
        term["total"] = term["cls"] + term["l1"] + term["giou"]
        out.append(term)
    return out


def total_loss(hungarian: Sequence, reconstruction: Sequence[Sequence], T: int, S: int):
    """Mean over templates of ``L_H(t) + mean_s L_R(t, s)``."""
    if T < 1 or S < 1:
        raise ValueError("T and S must be >= 1")
    acc = 0.0
    for t in range(T):
        rec = reconstruction[t] if t < len(reconstruction) else []
        acc = acc + hungarian[t] + (sum(rec) / S if len(rec) else 0.0)
    return acc / T


# -- training loop ------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_drop: int | None = None  # epoch index of the x0.1 decay; default 90% of epochs
    templates: int = 4
    denoising: str = "optimized"  # off | original | optimized
    negatives: bool = True
    seed: int = 0
    template_long_side: int = 32
    grad_clip: float = 0.1
    num_categories: int = 10
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.denoising not in ("off", "original", "optimized"):
            raise ValueError(f"unknown denoising mode {self.denoising!r}")

    @property
    def drop_epoch(self) -> int:
        return self.lr_drop if self.lr_drop is not None else max(1, int(round(0.9 * self.epochs)))

    def to_dict(self) -> dict:
        return asdict(self)


class TemplateBank:
    """Template crops indexed by category, cached per (scene, object)."""

    def __init__(self, dataset: Sequence, long_side: int = 32):
        self.dataset = dataset
        self.long_side = long_side
        self.by_category: dict[int, list[tuple[int, int]]] = {}
        for i, (_, anns) in enumerate(dataset):
            for j, a in enumerate(anns):
                self.by_category.setdefault(a.category_id, []).append((i, j))
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def crop(self, scene: int, obj: int) -> np.ndarray:
        key = (scene, obj)
        if key not in self._cache:
            image, anns = self.dataset[scene]
            self._cache[key] = crop_template(image, anns[obj].box, self.long_side)
        return self._cache[key]

    def sample(self, category: int, exclude_scene: int, rng: np.random.Generator) -> np.ndarray:
        pool = self.by_category[category]
        others = [p for p in pool if p[0] != exclude_scene]
        # Fall back to the current scene when no other scene has the category.
        choices = others or pool
        scene, obj = choices[int(rng.integers(0, len(choices)))]
        return self.crop(scene, obj)


def _pad_queries(qs: QuerySet, length: int, first_group: int) -> QuerySet:
    n = length - len(qs)
    if n <= 0:
        return qs
    d = qs.content.shape[1]
    pad = QuerySet(
        torch.zeros(n, d, dtype=qs.content.dtype),
        torch.tensor([[0.5, 0.5, 0.1, 0.1]], dtype=qs.boxes.dtype).repeat(n, 1),
        [PAD] * n,
        np.arange(first_group, first_group + n),  # each pad query is its own group
        np.full(n, -1),
        np.full(n, -1),
    )
    return QuerySet.cat([qs, pad])


@dataclass
class _ImagePlan:
    index: int
    relabeled: list[RelabeledAnnotationSet]
    det_slices: list[slice]
    dn_slices: list[slice]
    dn_targets: list


def batch_loss(model: SiameseDETR, batch: Sequence[tuple[int, np.ndarray, list]], bank: TemplateBank,
               cfg: TrainConfig, rng: np.random.Generator, reference: bool = False):
    """Forward one batch of ``(scene index, image, annotations)``; returns (loss, breakdowns).

    ``reference=True`` evaluates the loss group by group with
    :func:`hungarian_loss` / :func:`reconstruction_loss` instead of the
    vectorized path; both give the same value.
    """
    mcfg = model.cfg
    T, S, N = cfg.templates, mcfg.num_scales, mcfg.num_queries
    cats_per_image, templates = [], []
    for idx, _, anns in batch:
        cats = sample_template_categories(anns, T, rng)
        cats_per_image.append(cats)
        templates.extend(bank.sample(c, idx, rng) for c in cats)
    pooled_all = model.template_features(templates).view(len(batch), T, S, -1)
    learned = model.learned_boxes()

    query_sets, plans = [], []
    for b, ((idx, _, anns), cats) in enumerate(zip(batch, cats_per_image)):
        parts, relabeled, det_slices, dn_slices, dn_targets = [], [], [], [], []
        offset = 0
        for t, c in enumerate(cats):
            used = anns if cfg.negatives else [a for a in anns if a.category_id == c]
            relabeled.append(relabel_annotations(used, c))
            parts.append(build_detection_queries(pooled_all[b, t], learned, group=t))
            det_slices.append(slice(offset, offset + N))
            offset += N
        for t, c in enumerate(cats):
            if cfg.denoising == "off":
                dn_slices.append(slice(offset, offset))
                dn_targets.append(None)
                continue
            used = anns if cfg.negatives else [a for a in anns if a.category_id == c]
            qs, tg = build_denoising_queries(
                used, c, pooled_all[b, t], cfg.noise, rng, group=T + t, mode=cfg.denoising,
                label_embed=model.label_embed, num_categories=cfg.num_categories,
            )
            parts.append(qs)
            dn_slices.append(slice(offset, offset + len(qs)))
            dn_targets.append(tg)
            offset += len(qs)
        query_sets.append(QuerySet.cat(parts))
        plans.append(_ImagePlan(idx, relabeled, det_slices, dn_slices, dn_targets))

    q_max = max(len(q) for q in query_sets)
    query_sets = [_pad_queries(q, q_max, 2 * T) for q in query_sets]
    content = torch.stack([q.content for q in query_sets])
    boxes = torch.stack([q.boxes for q in query_sets])
    mask = torch.stack([q.attention_mask() for q in query_sets])

    feats = model.extract_features([im for _, im, _ in batch])
    memory = model.encode(feats)
    out = model.decode(content, boxes, memory, mask)
    if not (torch.isfinite(out.logits).all() and torch.isfinite(out.boxes).all()):
        raise TrainingDiverged("non-finite decoder outputs")

    if reference:
        breakdowns = [image_loss(out.logits[:, b], out.boxes[:, b], plan, S, cfg.weights)
                      for b, plan in enumerate(plans)]
    else:
        breakdowns = _batched_loss(out.logits, out.boxes, plans, N, S, cfg.weights)
    total = torch.stack([bd.total for bd in breakdowns]).mean()
    return total, breakdowns


def image_loss(logits, boxes, plan: _ImagePlan, S: int, weights: LossWeights) -> LossBreakdown:
    """Per-group loss of one image (reference path)."""
    T = len(plan.relabeled)
    hung, recon = [], []
    parts = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "recon": 0.0, "recon_cls": 0.0}
    for t in range(T):
        sl, targets = plan.det_slices[t], plan.relabeled[t]
        lg, bx = logits[:, sl], boxes[:, sl]
        matches = [hungarian_match(lg[l].detach(), bx[l].detach(), targets, weights) for l in range(lg.shape[0])]
        h = hungarian_loss(lg, bx, targets, matches, weights)
        hung.append(h["total"])
        for k in ("cls", "l1", "giou"):
            parts[k] = parts[k] + h[k] / T
        tg = plan.dn_targets[t]
        if tg is None:
            recon.append([])
            continue
        dsl = plan.dn_slices[t]
        r = reconstruction_loss(logits[:, dsl], boxes[:, dsl], tg.labels, tg.boxes, S, weights)
        recon.append([term["total"] for term in r])
        parts["recon"] = parts["recon"] + sum(term["total"] for term in r) / S / T
        parts["recon_cls"] = parts["recon_cls"] + sum(term["cls"] for term in r) / S / T
    total = total_loss(hung, recon, T, S)
    return LossBreakdown(total, hung, recon, parts)


def _batched_loss(logits, boxes, plans: Sequence[_ImagePlan], N: int, S: int,
                  weights: LossWeights) -> list[LossBreakdown]:
    """All images, templates and layers at once; matches :func:`image_loss`."""
    L, B = logits.shape[:2]
    T = len(plans[0].relabeled)
    dtype = boxes.dtype
    det_logits = logits[:, :, : T * N].reshape(L, B, T, N)
    det_boxes = boxes[:, :, : T * N].reshape(L, B, T, N, 4)

    k_max = max(len(r) for p in plans for r in p.relabeled)
    gt = np.zeros((B, T, k_max, 4))
    norm = np.ones((B, T))
    m_l, m_b, m_t, m_q, m_k = [], [], [], [], []
    with torch.no_grad():
        det_l64 = det_logits.detach().double()
        det_b64 = det_boxes.detach().double()
        for b, plan in enumerate(plans):
            for t, rel in enumerate(plan.relabeled):
                gt[b, t, : len(rel)] = rel.boxes
                pos = rel.positives
                norm[b, t] = max(1, len(pos))
                if len(pos) == 0:
                    continue
                if len(pos) > N:
                    raise ValueError(f"{len(pos)} positive targets exceed {N} queries")
                for l in range(L):
                    cost = matching_cost(det_l64[l, b, t], det_b64[l, b, t], rel.boxes[pos], weights)
                    rows, cols = kernels.linear_sum_assignment(cost)
                    m_l.extend([l] * len(rows))
                    m_b.extend([b] * len(rows))
                    m_t.extend([t] * len(rows))
                    m_q.extend(rows.tolist())
                    m_k.extend(pos[cols].tolist())
    gt_t = torch.as_tensor(gt, dtype=dtype)
    norm_t = torch.as_tensor(norm, dtype=dtype)
    a, g = weights.alpha, weights.gamma

    cls_target = torch.zeros_like(det_logits)
    l1 = giou = torch.zeros(B * T, dtype=dtype)
    if m_l:
        ml, mb, mt, mq, mk = (torch.as_tensor(x) for x in (m_l, m_b, m_t, m_q, m_k))
        cls_target[ml, mb, mt, mq] = 1.0
        pred, tgt = det_boxes[ml, mb, mt, mq], gt_t[mb, mt, mk]
        key = mb * T + mt
        l1 = l1.index_add(0, key, (pred - tgt).abs().sum(-1))
        giou = giou.index_add(0, key, 1 - giou_t(pred, tgt))
    cls = focal_terms(det_logits, cls_target, a, g).sum(dim=(0, 3))
    h_cls = weights.cls * cls / norm_t
    h_l1 = weights.l1 * l1.view(B, T) / norm_t
    h_giou = weights.giou * giou.view(B, T) / norm_t
    hung = h_cls + h_l1 + h_giou  # (B, T)

    has_dn = plans[0].dn_targets[0] is not None
    recon = None
    if has_dn:
        d_b, d_q, d_key, d_lab, d_box = [], [], [], [], []
        for b, plan in enumerate(plans):
            for t, (sl, tg) in enumerate(zip(plan.dn_slices, plan.dn_targets)):
                n = sl.stop - sl.start
                if n == 0:
                    continue
                k = n // S
                d_b.append(np.full(n, b))
                d_q.append(np.arange(sl.start, sl.stop))
                d_key.append((b * T + t) * S + np.repeat(np.arange(S), k))
                d_lab.append(tg.labels)
                d_box.append(tg.boxes)
        db, dq = torch.as_tensor(np.concatenate(d_b)), torch.as_tensor(np.concatenate(d_q))
        dkey = torch.as_tensor(np.concatenate(d_key))
        lab = torch.cat(d_lab).to(dtype)
        clean = torch.cat(d_box).to(dtype)
        lg, bx = logits[:, db, dq], boxes[:, db, dq]  # (L, M), (L, M, 4)
        size = B * T * S
        pos = lab > 0.5
        r_norm = torch.zeros(size, dtype=dtype).index_add(0, dkey, pos.to(dtype)).clamp(min=1)
        r_cls = torch.zeros(size, dtype=dtype).index_add(
            0, dkey, focal_terms(lg, lab.expand_as(lg), a, g).sum(0))
        pb, pc, pk = bx[:, pos], clean[pos].expand(L, -1, -1), dkey[pos]
        r_l1 = torch.zeros(size, dtype=dtype).index_add(0, pk, (pb - pc).abs().sum(-1).sum(0))
        r_giou = torch.zeros(size, dtype=dtype).index_add(0, pk, (1 - giou_t(pb, pc)).sum(0))
        recon = ((weights.cls * r_cls + weights.l1 * r_l1 + weights.giou * r_giou) / r_norm).view(B, T, S)
        recon_cls = (weights.cls * r_cls / r_norm).view(B, T, S)

    per_image = hung.mean(1) + (recon.mean(2).mean(1) if recon is not None else 0)
    out = []
    for b in range(B):
        parts = {"cls": h_cls[b].mean(), "l1": h_l1[b].mean(), "giou": h_giou[b].mean(),
                 "recon": recon[b].mean() if recon is not None else 0.0,
                 "recon_cls": recon_cls[b].mean() if recon is not None else 0.0}
        rec = [list(recon[b, t].unbind()) if recon is not None else [] for t in range(T)]
        out.append(LossBreakdown(per_image[b], list(hung[b].unbind()), rec, parts))
    return out


@dataclass
class TrainResult:
    epoch_losses: list[float]
    steps: int
    records: list[dict]


def _item(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def train(dataset: Sequence, model: SiameseDETR, cfg: TrainConfig | None = None,
          log_path: str | Path | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train in place on ``dataset`` (a sequence of ``(image, annotations)``).

    Deterministic for a fixed ``cfg.seed`` in a single process. Images without
    annotations are skipped. Raises :class:`TrainingDiverged` on a NaN loss.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    bank = TemplateBank(dataset, cfg.template_long_side)
    usable = [i for i, (_, anns) in enumerate(dataset) if anns]
    if not usable:
        raise ValueError("training dataset has no annotated images")
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.drop_epoch, gamma=0.1)
    log_fh = open(log_path, "w") if log_path else None
    model.train()
    step = 0
    epoch_losses, records = [], []
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(usable)
            running = []
            for start in range(0, len(order), cfg.batch_size):
                ids = order[start : start + cfg.batch_size]
                batch = [(int(i), dataset[int(i)][0], dataset[int(i)][1]) for i in ids]
                try:
                    loss, parts = batch_loss(model, batch, bank, cfg, rng)
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"{exc} at step {step} (epoch {epoch})") from None
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                rec = {"step": step, "epoch": epoch, "total": _item(loss)}
                for k in ("cls", "l1", "giou", "recon"):
                    rec[k] = float(np.mean([_item(p.components[k]) for p in parts]))
                rec["lr"] = opt.param_groups[0]["lr"]
                records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                running.append(rec["total"])
                step += 1
            sched.step()
            epoch_losses.append(float(np.mean(running)) if running else math.nan)
            log.info("epoch %d loss %.4f", epoch, epoch_losses[-1])
            if on_epoch:
                on_epoch(epoch, epoch_losses[-1])
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(epoch_losses, step, records)
