"""Template-conditioned query detector: backbone, encoder, masked decoder, head.

Dense attention replaces deformable attention; cross-attention carries a
per-head Gaussian prior centred on each query box so that a query reads the
memory around its box.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import MIN_SIZE, clamp_boxes_t, inverse_sigmoid

CHECKPOINT_MAGIC = b"SQTK1"


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_scales: int = 4
    num_queries: int = 96
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    backbone_width: int = 32
    base_stride_log2: int = 3
    # Only the original-denoising ablation learns per-category content embeddings.
    num_label_embeddings: int = 0
    init_box_size: float = 0.12

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.num_queries % self.num_scales:
            raise ValueError(f"num_queries {self.num_queries} not divisible by num_scales {self.num_scales}")
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be divisible by 4 for the box sine embedding")

    @property
    def strides(self) -> list[int]:
        return [2 ** (s + self.base_stride_log2) for s in range(self.num_scales)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Memory(NamedTuple):
    tokens: torch.Tensor  # (B, L, D)
    pos: torch.Tensor  # (L, D)
    coords: torch.Tensor  # (L, 2) normalized token centres
    shapes: list[tuple[int, int]]


class DecoderOutput(NamedTuple):
    logits: torch.Tensor  # (layers, B, Q)
    boxes: torch.Tensor  # (layers, B, Q, 4)
    self_attn: list[torch.Tensor] | None = None  # per layer (B, H, Q, Q)


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, channels), channels)


class Backbone(nn.Module):
    """Stride-2 convolutional pyramid with a 1x1 projection per scale."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.backbone_width
        stem = []
        c_in = 3
        for _ in range(cfg.base_stride_log2 - 1):
            stem += [nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.GELU()]
            c_in = w
        self.stem = nn.Sequential(*stem)
        self.stages = nn.ModuleList()
        self.proj = nn.ModuleList()
        for _ in range(cfg.num_scales):
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, 2 * w, 3, stride=2, padding=1),
                    nn.GELU(),
                    nn.Conv2d(2 * w, 2 * w, 3, padding=1),
                    nn.GELU(),
                )
            )
            self.proj.append(nn.Sequential(nn.Conv2d(2 * w, cfg.hidden_dim, 1), _gn(cfg.hidden_dim)))
            c_in = 2 * w
        # Variance-preserving init: with the default init the colour signal
        # shrinks with depth and the maps are dominated by bias offsets.
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        out = []
        for stage, proj in zip(self.stages, self.proj):
            x = stage(x)
            out.append(proj(x))
        return out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v, mask=None, bias=None, need_weights=False):
        b, nq, d = q.shape
        nk = k.shape[1]
        h = self.heads
        q = self.q(q).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(k).view(b, nk, h, d // h).transpose(1, 2)
        v = self.v(v).view(b, nk, h, d // h).transpose(1, 2)
        # mask: (B or 1, nq, nk), True = attention allowed
        if not need_weights:
            attn_mask = bias
            if mask is not None:
                m = mask[:, None]
                attn_mask = m if bias is None else bias.masked_fill(~m, float("-inf"))
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
            return self.out(out.transpose(1, 2).reshape(b, nq, d)), None
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if bias is not None:
            scores = scores + bias
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        weights = scores.softmax(-1)
        out = (weights @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out(out), weights


class FFN(nn.Module):
    """Gated feed-forward block.

    The product of two projections lets a single layer compare the template
    content with the attended image features.
    """

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, 2 * hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        a, b = self.fc1(x).chunk(2, dim=-1)
        return self.fc2(a * F.gelu(b))


class MLP(nn.Module):
    def __init__(self, dims: Sequence[int]):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = Attention(cfg.hidden_dim, cfg.heads)
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.ffn = FFN(cfg.hidden_dim, cfg.ffn_dim)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, x, pos):
        qk = x + pos
        x = self.norm1(x + self.attn(qk, qk, x)[0])
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.self_attn = Attention(d, cfg.heads)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FFN(d, cfg.ffn_dim)
        self.norm3 = nn.LayerNorm(d)
        # Fixed per-head sharpness of the box-centred Gaussian prior.
        self.register_buffer("prior_sharpness", torch.tensor([2.0 ** (i + 1) for i in range(cfg.heads)]))

    def box_prior(self, boxes: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        cx, cy, w, h = boxes.unbind(-1)  # (B, Q)
        dx = (coords[None, None, :, 0] - cx[..., None]) / w[..., None].clamp(min=MIN_SIZE)
        dy = (coords[None, None, :, 1] - cy[..., None]) / h[..., None].clamp(min=MIN_SIZE)
        dist = (dx * dx + dy * dy)[:, None]  # (B, 1, Q, L)
        return -self.prior_sharpness.to(dist.dtype)[None, :, None, None] * dist

    def forward(self, x, query_pos, boxes, memory: Memory, mask, need_weights=False):
        qk = x + query_pos
        sa, weights = self.self_attn(qk, qk, x, mask=mask, need_weights=need_weights)
        x = self.norm1(x + sa)
        bias = self.box_prior(boxes, memory.coords)
        ca, _ = self.cross_attn(x + query_pos, memory.tokens + memory.pos, memory.tokens, bias=bias)
        x = self.norm2(x + ca)
        x = self.norm3(x + self.ffn(x))
        return x, weights


def sine_embed_2d(coords: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sine/cosine embedding of (..., k) normalized coordinates into (..., k*dim)."""
    half = dim // 2
    idx = torch.arange(half, dtype=coords.dtype, device=coords.device)
    freq = temperature ** (2 * idx / dim)
    x = coords[..., None] * (2 * math.pi) / freq
    emb = torch.cat([x.sin(), x.cos()], -1)
    return emb.flatten(-2)


class DetectionHead(nn.Module):
    """Single positive-class logit plus a 4-vector box delta (shared across layers)."""

    def __init__(self, dim: int):
        super().__init__()
        self.cls = nn.Linear(dim, 1)
        self.box = MLP([dim, dim, dim, 4])
        nn.init.constant_(self.cls.bias, -math.log((1 - 0.01) / 0.01))
        nn.init.zeros_(self.box.layers[-1].weight)
        nn.init.zeros_(self.box.layers[-1].bias)

    def forward(self, states: torch.Tensor):
        return self.cls(states).squeeze(-1), self.box(states)


class SiameseDETR(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.backbone = Backbone(cfg)
        self.scale_embed = nn.Parameter(torch.randn(cfg.num_scales, d) * 0.02)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.query_pos_head = MLP([2 * d, d, d])
        self.head = DetectionHead(d)
        self.query_boxes = nn.Parameter(self._init_query_boxes())
        if cfg.num_label_embeddings:
            self.label_embed = nn.Embedding(cfg.num_label_embeddings, d)
        else:
            self.label_embed = None

    def _init_query_boxes(self) -> torch.Tensor:
        n, s = self.cfg.num_queries, self.cfg.num_scales
        positions = n // s
        p = torch.arange(positions, dtype=torch.float64)
        # Low-discrepancy spread of anchor centres; every position hosts all scales.
        xs = torch.remainder(0.5 + p * 0.6180339887498949, 1.0)
        ys = (p + 0.5) / positions
        boxes = torch.empty(n, 4, dtype=torch.float64)
        boxes[:, 0] = xs.repeat_interleave(s)
        boxes[:, 1] = ys.repeat_interleave(s)
        boxes[:, 2:] = self.cfg.init_box_size
        boxes = boxes.clamp(0.02, 0.98)
        return inverse_sigmoid(boxes).float()

    # -- features -------------------------------------------------------------

    def extract_features(self, images) -> list[torch.Tensor]:
        x = self.prepare_images(images)
        min_side = 2**self.cfg.base_stride_log2
        if x.shape[-1] < min_side or x.shape[-2] < min_side:
            raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the finest stride {min_side}")
        return self.backbone(x)

    def prepare_images(self, images) -> torch.Tensor:
        """uint8 HxWx3 arrays (or a float NCHW tensor) to a normalized NCHW tensor."""
        dtype = next(self.parameters()).dtype
        if isinstance(images, torch.Tensor):
            return images.to(dtype)
        if isinstance(images, np.ndarray) and images.ndim == 3:
            images = [images]
        arr = np.stack([np.asarray(im) for im in images])
        x = torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)
        return (x / 255.0 - 0.5) / 0.25

    @staticmethod
    def pool_template(features: Sequence[torch.Tensor]) -> torch.Tensor:
        """Spatial mean of every scale map; returns (B, S, D)."""
        return torch.stack([f.mean(dim=(-2, -1)) for f in features], dim=1)

    def template_features(self, templates: Sequence[np.ndarray]) -> torch.Tensor:
        """Pooled features (n, S, D) for templates of possibly different shapes."""
        d = self.cfg.hidden_dim
        out = torch.empty(len(templates), self.cfg.num_scales, d, dtype=next(self.parameters()).dtype)
        if not templates:
            return out
        by_shape: dict[tuple, list[int]] = {}
        for i, t in enumerate(templates):
            by_shape.setdefault(tuple(t.shape), []).append(i)
        parts = []
        for idx in sorted(by_shape.values()):
            pooled = self.pool_template(self.extract_features([templates[i] for i in idx]))
            parts.append((idx, pooled))
        # index_put keeps autograd intact
        index = torch.tensor([i for idx, _ in parts for i in idx])
        values = torch.cat([p for _, p in parts])
        return out.index_put((index,), values) if len(index) else out

    # -- transformer ----------------------------------------------------------

    def encode(self, features: Sequence[torch.Tensor]) -> Memory:
        tokens, pos, coords, shapes = [], [], [], []
        d = self.cfg.hidden_dim
        for s, f in enumerate(features):
            b, _, h, w = f.shape
            tokens.append(f.flatten(2).transpose(1, 2))
            ys = (torch.arange(h, dtype=f.dtype) + 0.5) / h
            xs = (torch.arange(w, dtype=f.dtype) + 0.5) / w
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            c = torch.stack([gx.flatten(), gy.flatten()], -1)
            coords.append(c)
            pos.append(sine_embed_2d(c, d // 2) + self.scale_embed[s])
            shapes.append((h, w))
        x = torch.cat(tokens, 1)
        p = torch.cat(pos, 0)[None]
        for layer in self.encoder:
            x = layer(x, p)
        return Memory(x, p[0], torch.cat(coords, 0), shapes)

    def learned_boxes(self) -> torch.Tensor:
        return clamp_boxes_t(self.query_boxes.sigmoid())

    def decode(self, content: torch.Tensor, boxes: torch.Tensor, memory: Memory,
               mask: torch.Tensor | None = None, need_weights: bool = False) -> DecoderOutput:
        """Run the decoder on (B, Q, D) contents and (B, Q, 4) boxes.

        ``mask`` is a (Q, Q) or (B, Q, Q) boolean matrix, True where attention
        is allowed. Each layer refines boxes in inverse-sigmoid space.
        """
        if content.dim() == 2:
            content, boxes = content[None], boxes[None]
        b, q, _ = content.shape
        if mask is not None:
            if mask.dim() == 2:
                mask = mask[None]
            if mask.shape[-2:] != (q, q):
                raise ValueError(f"group mask shape {tuple(mask.shape[-2:])} does not match {q} queries")
        x = content
        ref = clamp_boxes_t(boxes)  # learned anchors receive gradient through the first layer
        logits, outs, attn = [], [], []
        for layer in self.decoder:
            query_pos = self.query_pos_head(sine_embed_2d(ref, self.cfg.hidden_dim // 2))
            x, w = layer(x, query_pos, ref, memory, mask, need_weights)
            logit, delta = self.head(x)
            new = clamp_boxes_t((inverse_sigmoid(ref) + delta).sigmoid())
            logits.append(logit)
            outs.append(new)
            attn.append(w)
            ref = new.detach()
        return DecoderOutput(torch.stack(logits), torch.stack(outs), attn if need_weights else None)

    def classify_and_regress(self, states: torch.Tensor):
        return self.head(states)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: SiameseDETR, path: str | Path) -> Path:
    """Binary checkpoint plus a ``config.json`` sidecar in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    header = json.dumps({k: list(v.shape) for k, v in state.items()}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for v in state.values():
            fh.write(v.to(torch.float32).numpy().astype("<f4").tobytes())
    (path.parent / "config.json").write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def read_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9 : 9 + n])
    offset = 9 + n
    state = {}
    for name, shape in header.items():
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return state


def load_checkpoint(path: str | Path, config_path: str | Path | None = None) -> SiameseDETR:
    path = Path(path)
    cfg_file = Path(config_path) if config_path else path.parent / "config.json"
    model = SiameseDETR(ModelConfig.from_dict(json.loads(cfg_file.read_text())))
    model.load_state_dict(read_checkpoint(path))
    model.eval()
    return model
