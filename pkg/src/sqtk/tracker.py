"""Online tracking-by-query.

Each frame runs one joint forward pass: N detection queries plus S*M
tracking queries seeded with the previous boxes of the M active tracks, in two
mutually masked groups. A track keeps the scale candidate that best overlaps
its previous box and survives if that candidate's score clears the
confidence threshold. Detections overlapping a surviving track are removed by
NMS; confident leftovers start new tracks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .geometry import Box, clamp_box, iou_matrix, nms
from .querybank import build_detection_queries, build_group_attention_mask, build_tracking_queries
from .scenegen import Annotation

ACTIVE, DEAD = "active", "dead"


@dataclass
class Track:
    id: int
    box: Box
    score: float
    age: int = 0
    status: str = ACTIVE


@dataclass
class TrackerConfig:
    confidence_threshold: float = 0.4
    nms_threshold: float = 0.5
    scoring_backend: str = "model"  # model | oracle

    def __post_init__(self):
        for name in ("confidence_threshold", "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.scoring_backend not in ("model", "oracle"):
            raise ValueError(f"unknown scoring backend {self.scoring_backend!r}")


@dataclass
class FrameResult:
    continued: dict[int, tuple[Box, float]] = field(default_factory=dict)
    born: list[Track] = field(default_factory=list)
    died: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[int, Box, float]]:
        """(id, box, score) of every track alive after this frame, ordered by id."""
        out = [(i, b, s) for i, (b, s) in self.continued.items()]
        out += [(t.id, t.box, t.score) for t in self.born]
        return sorted(out, key=lambda r: r[0])


@dataclass
class Outputs:
    """Final-layer predictions of one frame."""

    det_boxes: np.ndarray  # (N, 4)
    det_scores: np.ndarray  # (N,)
    track_boxes: np.ndarray  # (S, M, 4)
    track_scores: np.ndarray  # (S, M)


class ModelBackend:
    """Scores frames with a trained model; template features are pooled once."""

    def __init__(self, model, template: np.ndarray):
        self.model = model.eval()
        with torch.no_grad():
            self.pooled = model.template_features([template])[0]
            self.learned = model.learned_boxes()

    @torch.no_grad()
    def __call__(self, image: np.ndarray, annotations, tracked: np.ndarray) -> Outputs:
        model = self.model
        s = self.pooled.shape[0]
        det = build_detection_queries(self.pooled, self.learned, group=0)
        trk = build_tracking_queries(self.pooled, tracked, group=1)
        n, m = len(det), len(tracked)
        content = torch.cat([det.content, trk.content])[None]
        boxes = torch.cat([det.boxes, trk.boxes])[None]
        mask = build_group_attention_mask([n, s * m]) if m else None
        memory = model.encode(model.extract_features(image))
        out = model.decode(content, boxes, memory, mask)
        probs = out.logits[-1, 0].sigmoid().double().numpy()
        pred = out.boxes[-1, 0].double().numpy()
        return Outputs(pred[:n], probs[:n], pred[n:].reshape(s, m, 4), probs[n:].reshape(s, m))


class OracleBackend:
    """Testing seam that answers from ground truth.

    Detections are the GT boxes of the template category with score 1. Each
    tracked box is answered, at every scale, by the template-category GT box
    overlapping it most (score 1 if that overlap is positive, else 0).
    """

    def __init__(self, category: int, num_scales: int = 4):
        self.category = category
        self.num_scales = num_scales

    def __call__(self, image, annotations, tracked: np.ndarray) -> Outputs:
        if annotations is None:
            raise ValueError("the oracle backend needs frame annotations")
        gt = np.asarray([a.box for a in annotations if a.category_id == self.category], dtype=np.float64)
        gt = gt.reshape(-1, 4)
        s, m = self.num_scales, len(tracked)
        t_boxes = np.zeros((s, m, 4))
        t_scores = np.zeros((s, m))
        if m and len(gt):
            ov = iou_matrix(tracked, gt)
            best = ov.argmax(1)
            for j in range(m):
                t_boxes[:, j] = gt[best[j]]
                t_scores[:, j] = 1.0 if ov[j, best[j]] > 0 else 0.0
        elif m:
            t_boxes[:] = tracked[None]
        return Outputs(gt, np.ones(len(gt)), t_boxes, t_scores)


@dataclass
class TrackerState:
    backend: object
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 1
    frame_index: int = 0
    history: list[FrameResult] = field(default_factory=list)

    @property
    def active(self) -> list[Track]:
        return [t for t in self.tracks if t.status == ACTIVE]


def _split_frame(frame):
    """Accept an image, an ``(image, annotations)`` pair or a record with both."""
    if isinstance(frame, np.ndarray):
        return frame, None
    if isinstance(frame, tuple):
        return frame[0], frame[1]
    return frame.image, getattr(frame, "annotations", None)


def make_backend(cfg: TrackerConfig, template: np.ndarray | None = None, model=None,
                 category: int | None = None):
    if cfg.scoring_backend == "oracle":
        if category is None:
            raise ValueError("the oracle backend needs the template category")
        return OracleBackend(category, model.cfg.num_scales if model is not None else 4)
    if model is None or template is None:
        raise ValueError("the model backend needs a model and a template crop")
    return ModelBackend(model, template)


def _births(state: TrackerState, boxes: np.ndarray, scores: np.ndarray, cfg: TrackerConfig,
            keep_against: Sequence[Box]) -> list[Track]:
    # Detections below the threshold can only suppress lower-scoring ones,
    # so filtering first gives the same survivors as filtering after NMS.
    idx = np.flatnonzero(scores >= cfg.confidence_threshold)
    if len(idx) and len(keep_against):
        ov = iou_matrix(boxes[idx], np.asarray(keep_against, dtype=np.float64))
        idx = idx[(ov <= cfg.nms_threshold).all(1)]
    if len(idx) == 0:
        return []
    kept = idx[nms(boxes[idx], scores[idx], cfg.nms_threshold)]
    born = []
    for i in kept:
        born.append(Track(state.next_id, clamp_box(boxes[i]), float(scores[i]), 0, ACTIVE))
        state.next_id += 1
    return born


def initialize(first_frame, template: np.ndarray | None, cfg: TrackerConfig | None = None, model=None,
               category: int | None = None, backend=None) -> tuple[FrameResult, TrackerState]:
    """Detection-only pass on the first frame; confident NMS survivors become tracks."""
    cfg = cfg or TrackerConfig()
    backend = backend or make_backend(cfg, template, model, category)
    state = TrackerState(backend)
    image, anns = _split_frame(first_frame)
    out = backend(image, anns, np.zeros((0, 4)))
    born = _births(state, out.det_boxes, out.det_scores, cfg, [])
    state.tracks.extend(born)
    result = FrameResult(born=born)
    state.history.append(result)
    state.frame_index = 1
    return result, state


def step(frame, state: TrackerState, cfg: TrackerConfig | None = None) -> tuple[FrameResult, TrackerState]:
    """Advance every active track by one frame and admit new ones."""
    cfg = cfg or TrackerConfig()
    image, anns = _split_frame(frame)
    active = state.active
    prev = np.asarray([t.box for t in active], dtype=np.float64).reshape(-1, 4)
    out = state.backend(image, anns, prev)
    result = FrameResult()
    for j, track in enumerate(active):
        cand = out.track_boxes[:, j]
        ov = iou_matrix(cand, prev[j : j + 1])[:, 0]
        best = int(np.argmax(ov))  # first maximum: lowest scale wins ties
        score = float(out.track_scores[best, j])
        if score >= cfg.confidence_threshold:
            track.box = clamp_box(cand[best])
            track.score = score
            track.age += 1
            result.continued[track.id] = (track.box, score)
        else:
            track.status = DEAD
            result.died.append(track.id)
    kept = [b for b, _ in result.continued.values()]
    result.born = _births(state, out.det_boxes, out.det_scores, cfg, kept)
    state.tracks = [t for t in state.tracks if t.status == ACTIVE] + result.born
    state.history.append(result)
    state.frame_index += 1
    return result, state


@dataclass
class TrajectoryRow:
    frame: int  # 1-based
    id: int
    box: Box
    score: float


def run_video(frames: Iterable, template: np.ndarray | None, cfg: TrackerConfig | None = None, model=None,
              category: int | None = None) -> list[TrajectoryRow]:
    """Track strictly online over ``frames``; returns one row per live track per frame."""
    cfg = cfg or TrackerConfig()
    rows: list[TrajectoryRow] = []
    state = None
    for f, frame in enumerate(frames, start=1):
        if state is None:
            result, state = initialize(frame, template, cfg, model, category)
        else:
            result, state = step(frame, state, cfg)
        rows.extend(TrajectoryRow(f, i, b, s) for i, b, s in result.rows())
    if state is None:
        raise ValueError("run_video needs at least one frame")
    return rows


def rows_to_table(rows: Iterable[TrajectoryRow]) -> dict[int, list[tuple[int, Box]]]:
    table: dict[int, list[tuple[int, Box]]] = {}
    for r in rows:
        table.setdefault(r.frame, []).append((r.id, r.box))
    return table


def annotations_to_table(frames: Sequence[Sequence[Annotation]]) -> dict[int, list[tuple[int, Box]]]:
    """Ground-truth frame table (1-based frames) from per-frame annotations."""
    return {f: [(a.track_id, Box(*a.box)) for a in anns] for f, anns in enumerate(frames, start=1)}


# -- MOTChallenge files ---------------------------------------------------------


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def to_pixels(box: Sequence[float], width: int, height: int) -> tuple[int, int, int, int]:
    cx, cy, w, h = box
    return (
        _round_half_away((cx - 0.5 * w) * width),
        _round_half_away((cy - 0.5 * h) * height),
        _round_half_away(w * width),
        _round_half_away(h * height),
    )


def from_pixels(left: float, top: float, w: float, h: float, width: int, height: int) -> Box:
    return Box((left + 0.5 * w) / width, (top + 0.5 * h) / height, w / width, h / height)


def write_mot_csv(path: str | Path, rows: Iterable[TrajectoryRow], width: int, height: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in sorted(rows, key=lambda r: (r.frame, r.id)):
            left, top, bw, bh = to_pixels(r.box, width, height)
            w.writerow([r.frame, r.id, left, top, bw, bh, f"{r.score:.6f}", -1, -1, -1])
    return path


def read_mot_csv(path: str | Path, width: int, height: int) -> list[TrajectoryRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec:
                continue
            if len(rec) < 7:
                raise ValueError(f"{path}: expected at least 7 columns, got {len(rec)}")
            f, i = int(float(rec[0])), int(float(rec[1]))
            box = from_pixels(*(float(v) for v in rec[2:6]), width, height)
            rows.append(TrajectoryRow(f, i, box, float(rec[6])))
    return rows
