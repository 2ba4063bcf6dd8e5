"""Boxes, overlap measures, NMS and box noise.

All boxes are normalized center format ``(cx, cy, w, h)``. Scalar helpers work on
:class:`Box`; the ``*_t`` helpers are the differentiable torch versions used by
the model and the losses.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import torch

from . import kernels

MIN_SIZE = 1e-4

# Defaults for training-time box noise.
CENTER_NOISE = 0.4
SIZE_NOISE = 0.4


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    def to_corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def clamp(self) -> "Box":
        return clamp_box(self)

    def to_list(self) -> list[float]:
        return [float(v) for v in self]


def clamp_box(b: Sequence[float]) -> Box:
    cx, cy, w, h = (float(v) for v in b)
    return Box(
        min(max(cx, 0.0), 1.0),
        min(max(cy, 0.0), 1.0),
        min(max(w, MIN_SIZE), 1.0),
        min(max(h, MIN_SIZE), 1.0),
    )


def _intersection_union(a: Box, b: Box) -> tuple[float, float]:
    ax0, ay0, ax1, ay1 = a.to_corners()
    bx0, by0, bx1, by1 = b.to_corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter, a.area + b.area - inter


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    a, b = Box(*a), Box(*b)
    if a.area <= 0.0 or b.area <= 0.0:
        return 0.0
    inter, union = _intersection_union(a, b)
    return min(1.0, inter / union)


def giou(a: Sequence[float], b: Sequence[float]) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    a, b = Box(*a), Box(*b)
    if a.area <= 0.0 or b.area <= 0.0:
        return 0.0
    inter, union = _intersection_union(a, b)
    ax0, ay0, ax1, ay1 = a.to_corners()
    bx0, by0, bx1, by1 = b.to_corners()
    enclosing = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (enclosing - union) / enclosing


def iou_matrix(a, b) -> np.ndarray:
    return kernels.iou_matrix(a, b)


def nms(boxes, scores, threshold: float) -> list[int]:
    """Greedy NMS; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already-kept box exceeds
    ``threshold``. Equal scores keep the lower original index first.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"nms threshold must lie in [0, 1], got {threshold}")
    if len(boxes) == 0:
        return []
    return kernels.nms_indices(boxes, scores, threshold).tolist()


def jitter_box(
    b: Sequence[float],
    center_scale: float = CENTER_NOISE,
    size_scale: float = SIZE_NOISE,
    rng: np.random.Generator | None = None,
) -> Box:
    """Shift the center by up to ``center_scale`` of the box size and rescale
    width/height by a factor in ``[1 - size_scale, 1 + size_scale]``."""
    if center_scale < 0 or size_scale < 0:
        raise ValueError("noise scales must be non-negative")
    if rng is None:
        rng = np.random.default_rng()
    cx, cy, w, h = (float(v) for v in b)
    d = rng.uniform(-1.0, 1.0, size=4)
    return clamp_box(
        (
            cx + d[0] * center_scale * w,
            cy + d[1] * center_scale * h,
            w * (1.0 + d[2] * size_scale),
            h * (1.0 + d[3] * size_scale),
        )
    )


def jitter_boxes(boxes: np.ndarray, center_scale: float, size_scale: float, rng) -> np.ndarray:
    """Vectorized :func:`jitter_box` over an (n, 4) array (same draw layout)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    d = rng.uniform(-1.0, 1.0, size=(len(boxes), 4))
    out = np.empty_like(boxes)
    out[:, 0] = boxes[:, 0] + d[:, 0] * center_scale * boxes[:, 2]
    out[:, 1] = boxes[:, 1] + d[:, 1] * center_scale * boxes[:, 3]
    out[:, 2] = boxes[:, 2] * (1.0 + d[:, 2] * size_scale)
    out[:, 3] = boxes[:, 3] * (1.0 + d[:, 3] * size_scale)
    out[:, :2] = np.clip(out[:, :2], 0.0, 1.0)
    out[:, 2:] = np.clip(out[:, 2:], MIN_SIZE, 1.0)
    return out


# -- torch ------------------------------------------------------------------


def cxcywh_to_xyxy_t(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], -1)


def clamp_boxes_t(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2].clamp(0.0, 1.0), b[..., 2:].clamp(MIN_SIZE, 1.0)], -1)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(0.0, 1.0)
    return torch.log(x.clamp(min=eps) / (1.0 - x).clamp(min=eps))


def _iou_parts_t(a, b):
    a, b = cxcywh_to_xyxy_t(a), cxcywh_to_xyxy_t(b)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    elt = torch.minimum(a[..., :2], b[..., :2])
    erb = torch.maximum(a[..., 2:], b[..., 2:])
    ewh = erb - elt
    enclosing = ewh[..., 0] * ewh[..., 1]
    return inter, union, enclosing


def giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU between broadcastable center-format box tensors."""
    inter, union, enclosing = _iou_parts_t(a, b)
    return inter / union - (enclosing - union) / enclosing


def pairwise_giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return giou_t(a[:, None, :], b[None, :, :])


def pairwise_iou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, _ = _iou_parts_t(a[:, None, :], b[None, :, :])
    return inter / union
