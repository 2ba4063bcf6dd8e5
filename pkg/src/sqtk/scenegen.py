"""Deterministic synthetic-shapes scenes, sequences and template crops.

Ten procedurally drawn categories, each with its own silhouette, hue and
texture. Annotation boxes are the tight bounds of the drawn mask, so they are
pixel aligned.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .geometry import Box

CATEGORY_NAMES = (
    "disk",
    "square",
    "triangle",
    "ring",
    "cross",
    "star",
    "bar",
    "diamond",
    "crescent",
    "checker-square",
)


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Annotation:
    box: Box
    category_id: int
    track_id: int | None = None

    def to_json(self) -> dict:
        return {"bbox": self.box.to_list(), "category_id": int(self.category_id), "track_id": self.track_id}

    @classmethod
    def from_json(cls, d: dict) -> "Annotation":
        tid = d.get("track_id")
        return cls(Box(*map(float, d["bbox"])), int(d["category_id"]), None if tid is None else int(tid))


@dataclass
class SceneConfig:
    image_size: int = 128
    num_categories: int = 10
    objects_per_scene: tuple[int, int] = (3, 8)
    categories_per_scene: tuple[int, int] = (2, 4)
    min_separation: float = 0.02
    noise_std: float = 4.0
    seed: int = 0
    # Subset of category ids a scene may draw from; None means all.
    categories: tuple[int, ...] | None = None
    object_size: tuple[int, int] = (12, 28)

    def __post_init__(self):
        self.objects_per_scene = tuple(self.objects_per_scene)
        self.categories_per_scene = tuple(self.categories_per_scene)
        self.object_size = tuple(self.object_size)
        if self.categories is not None:
            self.categories = tuple(int(c) for c in self.categories)
        self.validate()

    def validate(self) -> None:
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        for name in ("objects_per_scene", "categories_per_scene", "object_size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} must be a non-empty range, got {(lo, hi)}")
        if not 1 <= self.num_categories <= len(CATEGORY_NAMES):
            raise ValueError(f"num_categories must be in [1, {len(CATEGORY_NAMES)}]")
        pool = self.category_pool()
        if not pool or any(c < 0 or c >= self.num_categories for c in pool):
            raise ValueError(f"categories {self.categories} outside [0, {self.num_categories})")
        if self.object_size[1] > self.image_size:
            raise ValueError("object_size exceeds image_size")

    def category_pool(self) -> tuple[int, ...]:
        if self.categories is None:
            return tuple(range(self.num_categories))
        return self.categories

    def to_dict(self) -> dict:
        return _plain(asdict(self))


@dataclass
class SequenceConfig(SceneConfig):
    num_frames: int = 20
    max_step: float = 0.3
    birth_prob: float = 0.05
    death_prob: float = 0.02
    motion_model: str = "linear"

    def validate(self) -> None:
        super().validate()
        if self.max_step < 0:
            raise ValueError("max_step must be >= 0")
        for p in (self.birth_prob, self.death_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("birth_prob/death_prob must lie in [0, 1]")
        if self.motion_model not in ("linear", "curved"):
            raise ValueError(f"unknown motion_model {self.motion_model!r}")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def config_from_dict(d: dict, cls=None):
    if cls is None:
        cls = SequenceConfig if "num_frames" in d else SceneConfig
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


# -- appearance ---------------------------------------------------------------

_HUES = np.arange(10) * 36.0


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = (h % 360.0) / 60.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array([r, g, b]) * 255.0


def _shape_mask(cat: int, u: np.ndarray, v: np.ndarray, params: dict) -> np.ndarray:
    """Silhouette on local coordinates u, v in [-1, 1] (v grows downward)."""
    r = np.hypot(u, v)
    if cat == 0:
        return r <= 1.0
    if cat in (1, 6, 9):
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if cat == 2:
        return np.abs(u) <= (v + 1.0) / 2.0 + 1e-9
    if cat == 3:
        return (r <= 1.0) & (r >= 0.5)
    if cat == 4:
        return (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    if cat == 5:
        theta = np.arctan2(v, u) + params.get("spin", 0.0)
        return r <= 0.5 + 0.5 * np.abs(np.cos(2.5 * theta))
    if cat == 7:
        return np.abs(u) + np.abs(v) <= 1.0
    if cat == 8:
        return (r <= 1.0) & (np.hypot(u - 0.55, v) > 0.75)
    raise ValueError(f"unknown category {cat}")


def _texture(cat: int, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Brightness modulation in [0.55, 1] per pixel (coordinates in pixels)."""
    kind = cat % 5
    if cat == 9:
        return np.where(((px // 3) + (py // 3)) % 2 == 0, 1.0, 0.45)
    if kind == 0:
        return np.ones_like(px, dtype=np.float64)
    if kind == 1:
        return np.where((py // 2) % 2 == 0, 1.0, 0.6)
    if kind == 2:
        return np.where((px // 2) % 2 == 0, 1.0, 0.6)
    if kind == 3:
        return np.where(((px % 4) < 2) & ((py % 4) < 2), 0.6, 1.0)
    return np.where(((px + py) // 2) % 2 == 0, 1.0, 0.65)


@dataclass
class _Instance:
    category: int
    mask: np.ndarray  # bool (h, w)
    pixels: np.ndarray  # float (h, w, 3)
    x: int = 0  # top-left column
    y: int = 0  # top-left row
    track_id: int | None = None
    vx: float = 0.0
    vy: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    turn: float = 0.0

    @property
    def h(self) -> int:
        return self.mask.shape[0]

    @property
    def w(self) -> int:
        return self.mask.shape[1]

    def box(self, size: int) -> Box:
        return Box((self.x + 0.5 * self.w) / size, (self.y + 0.5 * self.h) / size, self.w / size, self.h / size)


def _make_instance(cat: int, cfg: SceneConfig, rng: np.random.Generator) -> _Instance:
    lo, hi = cfg.object_size
    size = int(rng.integers(lo, hi + 1))
    if cat == 6:
        aspect = rng.uniform(2.2, 3.0)
        long_side, short_side = size, max(4, int(round(size / aspect)))
        pw, ph = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
    elif cat in (1, 9):
        pw = ph = size
    else:
        aspect = rng.uniform(0.8, 1.25)
        pw = size
        ph = max(4, min(hi, int(round(size / aspect))))
    params = {"spin": rng.uniform(0, 2 * np.pi)}
    yy, xx = np.mgrid[0:ph, 0:pw].astype(np.float64)
    u = (xx + 0.5) / pw * 2.0 - 1.0
    v = (yy + 0.5) / ph * 2.0 - 1.0
    mask = _shape_mask(cat, u, v, params)
    ys, xs = np.nonzero(mask)
    mask = mask[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    yy, xx = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
    color = _hsv_to_rgb(_HUES[cat] + rng.uniform(-6, 6), rng.uniform(0.75, 0.95), rng.uniform(0.8, 1.0))
    tex = _texture(cat, xx, yy)
    pixels = tex[..., None] * color[None, None, :]
    return _Instance(cat, mask, pixels)


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    base = rng.uniform(70, 130)
    gx, gy = rng.uniform(-25, 25, size=2)
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1) - 0.5
    gray = base + gx * xx + gy * yy
    tint = rng.uniform(-8, 8, size=3)
    return gray[..., None] + tint[None, None, :]


def _gap_ok(inst: _Instance, others: Iterable[_Instance], size: int, min_sep: float) -> bool:
    if min_sep <= 0:
        return True
    gap = min_sep * size
    for o in others:
        if o is inst:
            continue
        dx = max(o.x - (inst.x + inst.w), inst.x - (o.x + o.w))
        dy = max(o.y - (inst.y + inst.h), inst.y - (o.y + o.h))
        if dx < gap and dy < gap:
            return False
    return True


def _place(inst: _Instance, placed: list[_Instance], cfg: SceneConfig, rng, retries: int = 200) -> bool:
    n = cfg.image_size
    for _ in range(retries):
        inst.x = int(rng.integers(0, n - inst.w + 1))
        inst.y = int(rng.integers(0, n - inst.h + 1))
        if _gap_ok(inst, placed, n, cfg.min_separation):
            return True
    return False


def _compose(background: np.ndarray, instances: Sequence[_Instance], noise: np.ndarray) -> np.ndarray:
    img = background.copy()
    for inst in instances:
        region = img[inst.y : inst.y + inst.h, inst.x : inst.x + inst.w]
        region[inst.mask] = inst.pixels[inst.mask]
    img += noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _pick_categories(cfg: SceneConfig, n_objects: int, rng) -> list[int]:
    pool = cfg.category_pool()
    lo, hi = cfg.categories_per_scene
    k = int(rng.integers(lo, hi + 1))
    k = max(1, min(k, len(pool)))
    chosen = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    cats = [chosen[i % k] for i in range(min(n_objects, k))]
    cats += [chosen[int(i)] for i in rng.integers(0, k, size=max(0, n_objects - k))]
    return cats


def _resolve_rng(cfg, rng):
    return np.random.default_rng(cfg.seed) if rng is None else rng


def generate_scene(cfg: SceneConfig, rng: np.random.Generator | None = None):
    """Render one still image; returns ``(image uint8 HxWx3, annotations)``.

    Background and objects use separate child streams so the background of a
    given seed does not depend on the object count.
    """
    rng = _resolve_rng(cfg, rng)
    bg_rng, obj_rng, noise_rng = rng.spawn(3)
    background = _background(cfg, bg_rng)
    lo, hi = cfg.objects_per_scene
    n_obj = int(obj_rng.integers(lo, hi + 1))
    cats = _pick_categories(cfg, n_obj, obj_rng) if n_obj else []
    placed: list[_Instance] = []
    for cat in cats:
        inst = _make_instance(cat, cfg, obj_rng)
        if not _place(inst, placed, cfg, obj_rng):
            raise SceneGenerationError(
                f"could not place object {len(placed) + 1}/{n_obj} with min_separation={cfg.min_separation}"
            )
        placed.append(inst)
    noise = noise_rng.normal(0.0, cfg.noise_std, size=background.shape) if cfg.noise_std > 0 else 0.0
    image = _compose(background, placed, noise)
    anns = [Annotation(p.box(cfg.image_size), p.category) for p in placed]
    return image, anns


def _set_velocity(inst: _Instance, cfg: SequenceConfig) -> None:
    # Elliptic velocity bound keeps |dx| <= max_step*w and |dy| <= max_step*h.
    inst.vx = cfg.max_step * inst.speed * inst.w * math.cos(inst.heading)
    inst.vy = cfg.max_step * inst.speed * inst.h * math.sin(inst.heading)


def _move(inst: _Instance, alive: list[_Instance], cfg: SequenceConfig) -> None:
    n = cfg.image_size
    if cfg.motion_model == "curved":
        inst.heading += inst.turn
        _set_velocity(inst, cfg)
    for attempt in range(2):
        dx, dy = int(inst.vx), int(inst.vy)  # trunc toward zero keeps the bound
        nx, ny = inst.x + dx, inst.y + dy
        if nx < 0 or nx + inst.w > n:
            inst.heading = math.pi - inst.heading
            _set_velocity(inst, cfg)
            nx = inst.x - dx
        if ny < 0 or ny + inst.h > n:
            inst.heading = -inst.heading
            _set_velocity(inst, cfg)
            ny = inst.y - dy
        nx = min(max(nx, 0), n - inst.w)
        ny = min(max(ny, 0), n - inst.h)
        ox, oy = inst.x, inst.y
        inst.x, inst.y = nx, ny
        if _gap_ok(inst, alive, n, cfg.min_separation):
            return
        inst.x, inst.y = ox, oy
        inst.heading += math.pi
        _set_velocity(inst, cfg)


def generate_sequence(cfg: SequenceConfig, rng: np.random.Generator | None = None):
    """Render a video; returns a list of ``(image, annotations)`` with track ids.

    Identities persist; a dead id is never reused. Births that cannot be placed
    under ``min_separation`` are skipped (the initial population still raises).
    """
    rng = _resolve_rng(cfg, rng)
    bg_rng, obj_rng, noise_rng = rng.spawn(3)
    background = _background(cfg, bg_rng)
    lo, hi = cfg.objects_per_scene
    n_obj = int(obj_rng.integers(lo, hi + 1))
    scene_cats = _pick_categories(cfg, max(n_obj, 1), obj_rng)
    next_id = 0
    alive: list[_Instance] = []

    def spawn(cat: int, strict: bool) -> None:
        nonlocal next_id
        inst = _make_instance(cat, cfg, obj_rng)
        inst.heading = obj_rng.uniform(0, 2 * math.pi)
        inst.speed = obj_rng.uniform(0.5, 1.0)
        inst.turn = obj_rng.uniform(-0.25, 0.25)
        _set_velocity(inst, cfg)
        if not _place(inst, alive, cfg, obj_rng):
            if strict:
                raise SceneGenerationError(
                    f"could not place object {len(alive) + 1}/{n_obj} with min_separation={cfg.min_separation}"
                )
            return
        inst.track_id = next_id
        next_id += 1
        alive.append(inst)

    for cat in scene_cats[:n_obj]:
        spawn(cat, strict=True)

    frames = []
    for t in range(cfg.num_frames):
        if t > 0:
            if cfg.death_prob > 0:
                alive = [a for a in alive if obj_rng.random() >= cfg.death_prob]
            for inst in alive:
                _move(inst, alive, cfg)
            if cfg.birth_prob > 0 and obj_rng.random() < cfg.birth_prob:
                spawn(scene_cats[int(obj_rng.integers(0, len(scene_cats)))], strict=False)
        noise = noise_rng.normal(0.0, cfg.noise_std, size=background.shape) if cfg.noise_std > 0 else 0.0
        image = _compose(background, alive, noise)
        anns = [Annotation(a.box(cfg.image_size), a.category, a.track_id) for a in alive]
        frames.append((image, anns))
    return frames


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def template_size(width: int, height: int, target_long_side: int) -> tuple[int, int]:
    """Output ``(width, height)`` with the long side at ``target_long_side``."""
    if width >= height:
        return target_long_side, max(1, _round_half_away(target_long_side * height / width))
    return max(1, _round_half_away(target_long_side * width / height)), target_long_side


def crop_template(image: np.ndarray, box: Sequence[float], target_long_side: int = 32) -> np.ndarray:
    """Crop ``box`` from ``image`` and bilinearly resize, preserving aspect."""
    h, w = image.shape[:2]
    cx, cy, bw, bh = (float(v) for v in box)
    x0 = max(0, math.floor((cx - 0.5 * bw) * w + 1e-9))
    y0 = max(0, math.floor((cy - 0.5 * bh) * h + 1e-9))
    x1 = min(w, math.ceil((cx + 0.5 * bw) * w - 1e-9))
    y1 = min(h, math.ceil((cy + 0.5 * bh) * h - 1e-9))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"template box {tuple(box)} does not intersect the {w}x{h} image")
    crop = np.ascontiguousarray(image[y0:y1, x0:x1])
    out_w, out_h = template_size(x1 - x0, y1 - y0, target_long_side)
    resized = Image.fromarray(crop).resize((out_w, out_h), Image.BILINEAR)
    return np.asarray(resized)


# -- dataset directories ------------------------------------------------------


def _write_png(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG", optimize=False)


def scene_dataset(cfg: SceneConfig, count: int) -> list[tuple[np.ndarray, list[Annotation]]]:
    """``count`` stills for ``cfg.seed``; identical to what :func:`write_scenes` stores."""
    rng = np.random.default_rng(cfg.seed)
    return [generate_scene(cfg, child) for child in (rng.spawn(count) if count else [])]


def sequence_dataset(cfg: SequenceConfig, count: int) -> list[list[tuple[np.ndarray, list[Annotation]]]]:
    rng = np.random.default_rng(cfg.seed)
    return [generate_sequence(cfg, child) for child in (rng.spawn(count) if count else [])]


def write_scenes(root: str | Path, cfg: SceneConfig, count: int) -> Path:
    """Generate ``count`` stills into ``root`` (scenes/, annotations.jsonl, meta.json)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "scenes").mkdir(exist_ok=True)
    with open(root / "annotations.jsonl", "w") as fh:
        for i, (image, anns) in enumerate(scene_dataset(cfg, count)):
            rel = f"scenes/{i:06d}.png"
            _write_png(root / rel, image)
            fh.write(json.dumps({"image": rel, "objects": [a.to_json() for a in anns]}) + "\n")
    _write_meta(root, "scenes", cfg, count)
    return root


def write_sequences(root: str | Path, cfg: SequenceConfig, count: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(exist_ok=True)
    with open(root / "annotations.jsonl", "w") as fh:
        for s, frames in enumerate(sequence_dataset(cfg, count)):
            seq = f"{s:04d}"
            for f, (image, anns) in enumerate(frames, start=1):
                rel = f"frames/{seq}/{f:06d}.png"
                _write_png(root / rel, image)
                rec = {"image": rel, "sequence": seq, "frame": f, "objects": [a.to_json() for a in anns]}
                fh.write(json.dumps(rec) + "\n")
    _write_meta(root, "sequences", cfg, count)
    return root


def _write_meta(root: Path, kind: str, cfg: SceneConfig, count: int) -> None:
    meta = {"kind": kind, "count": count, "seed": cfg.seed, "config": cfg.to_dict(),
            "categories": list(CATEGORY_NAMES[: cfg.num_categories])}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


@dataclass
class Record:
    image_path: str
    annotations: list[Annotation]
    sequence: str | None = None
    frame: int | None = None
    _root: Path | None = field(default=None, repr=False)
    _image: np.ndarray | None = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = np.asarray(Image.open(self._root / self.image_path).convert("RGB"))
        return self._image


def read_annotations(root: str | Path) -> list[Record]:
    root = Path(root)
    path = root / "annotations.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no annotations.jsonl in {root}")
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            anns = [Annotation.from_json(o) for o in d["objects"]]
            records.append(Record(d["image"], anns, d.get("sequence"), d.get("frame"), _root=root))
    return records


def read_meta(root: str | Path) -> dict:
    return json.loads((Path(root) / "meta.json").read_text())


def group_sequences(records: Sequence[Record]) -> dict[str, list[Record]]:
    seqs: dict[str, list[Record]] = {}
    for r in records:
        seqs.setdefault(r.sequence or "0000", []).append(r)
    for frames in seqs.values():
        frames.sort(key=lambda r: r.frame or 0)
    return dict(sorted(seqs.items()))
