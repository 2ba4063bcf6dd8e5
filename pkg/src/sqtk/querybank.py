"""Detection, tracking and denoising query populations and the group mask.

Queries are held in a tensor-backed :class:`QuerySet`; indexing one yields an
:class:`ObjectQuery` view. Tracking and denoising sets are laid out
scale-major: query ``s * M + m`` pairs scale ``s`` with box ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .geometry import CENTER_NOISE, SIZE_NOISE, Box, jitter_boxes

DETECT, TRACK, DENOISE, PAD = "detect", "track", "denoise", "pad"


@dataclass(frozen=True)
class ObjectQuery:
    content: torch.Tensor
    box: Box
    role: str
    group: int
    origin: int | None = None
    scale: int | None = None


@dataclass
class QuerySet:
    content: torch.Tensor  # (Q, D)
    boxes: torch.Tensor  # (Q, 4)
    roles: list[str]
    groups: np.ndarray  # (Q,) int
    origins: np.ndarray  # (Q,) int, -1 when absent
    scales: np.ndarray  # (Q,) int, -1 when absent

    def __len__(self) -> int:
        return len(self.roles)

    def __getitem__(self, i: int) -> ObjectQuery:
        o, s = int(self.origins[i]), int(self.scales[i])
        return ObjectQuery(
            self.content[i],
            Box(*self.boxes[i].tolist()),
            self.roles[i],
            int(self.groups[i]),
            None if o < 0 else o,
            None if s < 0 else s,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def empty(cls, dim: int, dtype=torch.float32) -> "QuerySet":
        z = np.zeros(0, dtype=np.int64)
        return cls(torch.zeros(0, dim, dtype=dtype), torch.zeros(0, 4, dtype=dtype), [], z, z.copy(), z.copy())

    @classmethod
    def cat(cls, parts: Sequence["QuerySet"]) -> "QuerySet":
        parts = list(parts)
        return cls(
            torch.cat([p.content for p in parts]),
            torch.cat([p.boxes for p in parts]),
            [r for p in parts for r in p.roles],
            np.concatenate([p.groups for p in parts]),
            np.concatenate([p.origins for p in parts]),
            np.concatenate([p.scales for p in parts]),
        )

    def group_sizes(self) -> list[int]:
        """Run lengths of consecutive group ids (queries are stored group-contiguous)."""
        if len(self) == 0:
            return []
        change = np.flatnonzero(np.diff(self.groups)) + 1
        bounds = np.concatenate([[0], change, [len(self)]])
        return np.diff(bounds).tolist()

    def attention_mask(self) -> torch.Tensor:
        g = torch.from_numpy(self.groups)
        return g[:, None] == g[None, :]


@dataclass
class NoiseConfig:
    center_scale: float = CENTER_NOISE
    size_scale: float = SIZE_NOISE
    # Probability of switching the content category (original denoising arm only).
    label_flip: float = 0.5


def _filled(n: int, value: int) -> np.ndarray:
    return np.full(n, value, dtype=np.int64)


def build_detection_queries(pooled: torch.Tensor, learned: torch.Tensor, group: int = 0) -> QuerySet:
    """Query ``n`` takes content ``pooled[n mod S]`` and box ``learned[n]``."""
    s, n = pooled.shape[0], learned.shape[0]
    if n % s:
        raise ValueError(f"{n} learned boxes not divisible by {s} scales")
    idx = torch.arange(n) % s
    return QuerySet(pooled[idx], learned, [DETECT] * n, _filled(n, group), _filled(n, -1), _filled(n, -1))


def build_tracking_queries(pooled: torch.Tensor, tracked_boxes, track_ids: Sequence[int] | None = None,
                           group: int = 1) -> QuerySet:
    """One query per (scale, tracked box): content ``pooled[s]``, box ``tracked_boxes[m]``."""
    s, d = pooled.shape
    boxes = torch.as_tensor(np.asarray(tracked_boxes, dtype=np.float64).reshape(-1, 4), dtype=pooled.dtype)
    m = boxes.shape[0]
    if m == 0:
        return QuerySet.empty(d, pooled.dtype)
    ids = np.arange(m) if track_ids is None else np.asarray(track_ids, dtype=np.int64)
    content = pooled.repeat_interleave(m, dim=0)
    return QuerySet(
        content,
        boxes.repeat(s, 1),
        [TRACK] * (s * m),
        _filled(s * m, group),
        np.tile(ids, s),
        np.repeat(np.arange(s), m),
    )


@dataclass
class DenoiseTargets:
    labels: torch.Tensor  # (S*K,) float in {0, 1}
    boxes: torch.Tensor  # (S*K, 4) clean ground truth


def build_denoising_queries(annotations, template_category: int, pooled: torch.Tensor,
                            noise: NoiseConfig | None = None, rng: np.random.Generator | None = None,
                            group: int = 2, mode: str = "optimized",
                            label_embed: torch.nn.Embedding | None = None,
                            num_categories: int | None = None):
    """Jittered ground-truth boxes as extra queries with fixed targets.

    ``optimized``: every noisy box is paired with the template's pooled content
    at every scale; the label is 1 iff the box's category is the template's.
    ``original``: the content is a learned embedding of the (randomly switched)
    box category, while the label still follows the box's category only.
    """
    noise = noise or NoiseConfig()
    rng = rng if rng is not None else np.random.default_rng()
    s, d = pooled.shape
    k = len(annotations)
    if k == 0:
        empty = QuerySet.empty(d, pooled.dtype)
        return empty, DenoiseTargets(torch.zeros(0, dtype=pooled.dtype), torch.zeros(0, 4, dtype=pooled.dtype))
    clean = np.asarray([a.box for a in annotations], dtype=np.float64)
    cats = np.asarray([a.category_id for a in annotations])
    noisy = jitter_boxes(clean, noise.center_scale, noise.size_scale, rng)
    labels = (cats == template_category).astype(np.float64)
    if mode == "optimized":
        content = pooled.repeat_interleave(k, dim=0)
    elif mode == "original":
        if label_embed is None:
            raise ValueError("original denoising needs label embeddings")
        n_cat = num_categories or label_embed.num_embeddings
        switched = cats.copy()
        flip = rng.random(k) < noise.label_flip
        switched[flip] = rng.integers(0, n_cat, size=int(flip.sum()))
        content = label_embed(torch.from_numpy(switched)).to(pooled.dtype).repeat(s, 1)
    else:
        raise ValueError(f"unknown denoising mode {mode!r}")
    qs = QuerySet(
        content,
        torch.as_tensor(noisy, dtype=pooled.dtype).repeat(s, 1),
        [DENOISE] * (s * k),
        _filled(s * k, group),
        np.tile(np.arange(k), s),
        np.repeat(np.arange(s), k),
    )
    targets = DenoiseTargets(
        torch.as_tensor(labels, dtype=pooled.dtype).repeat(s),
        torch.as_tensor(clean, dtype=pooled.dtype).repeat(s, 1),
    )
    return qs, targets


def build_group_attention_mask(group_sizes: Sequence[int]) -> torch.Tensor:
    """Block-diagonal boolean matrix; True where two queries share a group."""
    if len(group_sizes) == 0:
        raise ValueError("group_sizes must be non-empty")
    if any(n < 0 for n in group_sizes):
        raise ValueError("group sizes must be non-negative")
    g = torch.repeat_interleave(torch.arange(len(group_sizes)), torch.as_tensor(list(group_sizes)))
    return g[:, None] == g[None, :]
