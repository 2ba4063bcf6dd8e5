"""Command-line entry point: gen-data, train, track, eval, probe, render.

Every command resolves a layered RunConfig (preset, then ``--config`` JSON,
then flags), writes it to ``<out>/run_config.json`` together with a
``.partial`` marker before doing any work, and removes the marker on success.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evalkit, scenegen, tracker
from .geometry import Box
from .model import ModelConfig, SiameseDETR, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("sqtk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
PARTIAL = ".partial"
RUN_CONFIG = "run_config.json"
CHECKPOINT = "model.sqtk"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

PRESETS = {
    "toy_scale": {
        "scene": scenegen.SequenceConfig().to_dict(),
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "tracker": asdict(tracker.TrackerConfig()),
    },
}
PRESETS["paper_scale"] = copy.deepcopy(PRESETS["toy_scale"])
PRESETS["paper_scale"]["model"].update(hidden_dim=256, num_scales=4, num_queries=600, encoder_layers=6,
                                       decoder_layers=6, heads=8, ffn_dim=2048)
PRESETS["paper_scale"]["train"].update(epochs=12, batch_size=16, lr=5e-5, lr_drop=11, templates=7,
                                       template_long_side=400)


@dataclass
class RunConfig:
    command: str
    seed: int
    out: str
    preset: str = "toy_scale"
    scene: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    tracker: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _merge(base: dict, update: dict, where: str) -> None:
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {where}.{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{where}.{k}")
        else:
            base[k] = v


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("SQTK_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SQTK_SEED must be an integer, got {env!r}") from None


def build_run_config(args: argparse.Namespace, overrides: dict) -> RunConfig:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}")
    layers = copy.deepcopy(PRESETS[args.preset])
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        file_layer = json.loads(path.read_text())
        for section, values in file_layer.items():
            if section not in layers:
                raise UsageError(f"unknown config section {section!r}")
            _merge(layers[section], values, section)
    for section, values in overrides.items():
        _merge(layers[section], {k: v for k, v in values.items() if v is not None}, section)
    options = {k: v for k, v in vars(args).items() if k not in ("func", "config", "preset", "seed", "out")}
    return RunConfig(args.command, resolve_seed(args.seed), str(args.out), args.preset, options=options, **layers)


def prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def start_run(cfg: RunConfig, force: bool) -> Path:
    out = Path(cfg.out)
    prepare_out(out, force)
    (out / RUN_CONFIG).write_text(cfg.to_json())
    (out / PARTIAL).write_text(f"{cfg.command} started; removed on success\n")
    return out


def finish_run(out: Path) -> None:
    (out / PARTIAL).unlink(missing_ok=True)


def _model_config(cfg: RunConfig) -> ModelConfig:
    try:
        return ModelConfig.from_dict(cfg.model)
    except ValueError as e:
        raise UsageError(str(e)) from None


# -- data access -------------------------------------------------------------------


def _records(root: str | Path) -> list[scenegen.Record]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    try:
        return scenegen.read_annotations(root)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{root}: malformed annotations ({e})") from None


class _Frames:
    """Lazy ``(image, annotations)`` view of dataset records."""

    def __init__(self, records):
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        r = self.records[i]
        try:
            return r.image, r.annotations
        except OSError as e:
            raise DataError(f"cannot read image {r.image_path}: {e}") from None

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _image_size(root: str | Path, records) -> tuple[int, int]:
    try:
        size = int(scenegen.read_meta(root)["config"]["image_size"])
        return size, size
    except (OSError, KeyError, ValueError):
        h, w = records[0].image.shape[:2]
        return w, h


def _sequences(root) -> dict[str, list[scenegen.Record]]:
    records = _records(root)
    if records and records[0].sequence is None:
        # stills: every scene is a one-frame sequence
        return {f"{i:04d}": [r] for i, r in enumerate(records)}
    return scenegen.group_sequences(records)


def _choose_template(first: scenegen.Record, spec: str, rng: np.random.Generator) -> int | None:
    if not first.annotations:
        return None
    if spec == "random-gt":
        return int(rng.integers(0, len(first.annotations)))
    if spec.startswith("index:"):
        k = int(spec.split(":", 1)[1])
        if not 0 <= k < len(first.annotations):
            raise UsageError(f"--template-box index {k} out of range ({len(first.annotations)} objects)")
        return k
    raise UsageError(f"--template-box must be random-gt or index:k, got {spec!r}")


def _load_model(checkpoint: str | None, cfg: RunConfig) -> SiameseDETR:
    if checkpoint:
        path = Path(checkpoint)
        if path.is_dir():
            path = path / CHECKPOINT
        if not path.exists():
            raise DataError(f"checkpoint {path} not found")
        try:
            return load_checkpoint(path)
        except (ValueError, OSError, KeyError) as e:
            raise DataError(f"cannot load checkpoint {path}: {e}") from None
    torch.manual_seed(cfg.seed)
    return SiameseDETR(_model_config(cfg)).eval()


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> Path:
    scene = {"seed": args.seed, "image_size": args.image_size, "num_frames": args.num_frames,
             "max_step": args.max_step, "birth_prob": args.birth_prob, "death_prob": args.death_prob,
             "motion_model": args.motion}
    if args.categories:
        scene["categories"] = [int(c) for c in args.categories.split(",")]
    cfg = build_run_config(args, {"scene": scene})
    cfg.scene["seed"] = cfg.seed
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = start_run(cfg, args.force)
    try:
        if args.kind == "scenes":
            sc = scenegen.config_from_dict(cfg.scene, scenegen.SceneConfig)
            scenegen.write_scenes(out, sc, args.count)
        else:
            sq = scenegen.config_from_dict(cfg.scene, scenegen.SequenceConfig)
            scenegen.write_sequences(out, sq, args.count)
    except (ValueError, scenegen.SceneGenerationError) as e:
        raise UsageError(str(e)) from None
    finish_run(out)
    return out


def cmd_train(args) -> Path:
    train_over = {"epochs": args.epochs, "templates": args.templates, "lr": args.lr,
                  "denoising": args.denoising, "batch_size": args.batch_size,
                  "negatives": None if args.negatives is None else args.negatives == "on"}
    cfg = build_run_config(args, {"train": train_over, "model": {"num_scales": args.scales}})
    if cfg.train["denoising"] == "original" and not cfg.model["num_label_embeddings"]:
        cfg.model["num_label_embeddings"] = cfg.train["num_categories"]
    cfg.train["seed"] = cfg.seed
    mcfg = _model_config(cfg)
    try:
        tcfg = TrainConfig(**cfg.train)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None
    records = _records(args.data)
    if args.limit:
        records = records[: args.limit]
    out = start_run(cfg, args.force)
    torch.manual_seed(cfg.seed)
    model = SiameseDETR(mcfg)
    data = _Frames(records)
    try:
        train(data, model, tcfg, log_path=out / "train_log.jsonl")
    except TrainingDiverged:
        raise
    except ValueError as e:
        raise DataError(str(e)) from None
    save_checkpoint(model, out / CHECKPOINT)
    finish_run(out)
    return out


def _dump_mask(out: Path, n: int, m: int, s: int) -> None:
    from PIL import Image

    from .querybank import build_group_attention_mask

    mask = build_group_attention_mask([n, s * m] if m else [n]).numpy()
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(out / "group_mask.pgm")


def cmd_track(args) -> Path:
    trk = {"confidence_threshold": args.confidence, "nms_threshold": args.nms, "scoring_backend": args.backend}
    cfg = build_run_config(args, {"tracker": trk})
    try:
        tcfg = tracker.TrackerConfig(**cfg.tracker)
    except ValueError as e:
        raise UsageError(str(e)) from None
    seqs = _sequences(args.data)
    if args.limit:
        seqs = dict(list(seqs.items())[: args.limit])
    model = None
    if tcfg.scoring_backend == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required with --backend model")
        model = _load_model(args.checkpoint, cfg)
    out = start_run(cfg, args.force)
    rng = np.random.default_rng(cfg.seed)
    long_side = args.long_side or cfg.train["template_long_side"]
    templates = {}
    for name, frames in seqs.items():
        width, height = _image_size(args.data, frames)
        k = _choose_template(frames[0], args.template_box, rng)
        rows = []
        if k is not None:
            ref = frames[0].annotations[k]
            crop = scenegen.crop_template(frames[0].image, ref.box, long_side)
            templates[name] = {"frame": 1, "index": k, "category_id": ref.category_id,
                               "track_id": ref.track_id, "bbox": list(ref.box)}
            rows = tracker.run_video(((f.image, f.annotations) for f in frames), crop, tcfg, model,
                                     ref.category_id)
        tracker.write_mot_csv(out / f"{name}.txt", rows, width, height)
    if args.debug_masks and model is not None:
        _dump_mask(out, model.cfg.num_queries, 1, model.cfg.num_scales)
    (out / "templates.json").write_text(json.dumps(templates, indent=2, sort_keys=True) + "\n")
    finish_run(out)
    return out


def _gt_table(frames, category: int | None):
    return {f: [(a.track_id, Box(*a.box)) for a in r.annotations
                if category is None or a.category_id == category]
            for f, r in enumerate(frames, start=1)}


def cmd_eval(args) -> Path:
    cfg = build_run_config(args, {})
    if not args.tracks and not args.checkpoint:
        raise UsageError("eval needs --tracks (tracking) or --checkpoint (detection)")
    seqs = _sequences(args.gt)
    model = _load_model(args.checkpoint, cfg) if args.checkpoint else None
    out = start_run(cfg, args.force)
    result: dict = {
        "iou_gate": args.iou_gate,
        "mAR_definition": f"recall at IoU >= {args.iou_gate} with at most 100 detections per image",
        "config": asdict(cfg),
    }
    if args.tracks:
        tracks = Path(args.tracks)
        if not tracks.is_dir():
            raise DataError(f"tracks directory {tracks} does not exist")
        tfile = tracks / "templates.json"
        templates = json.loads(tfile.read_text()) if tfile.exists() else {}
        gt_tables, hyp_tables, hyp_scores = {}, {}, {}
        for name, frames in seqs.items():
            width, height = _image_size(args.gt, frames)
            category = templates.get(name, {}).get("category_id")
            gt_tables[name] = _gt_table(frames, category)
            csv_path = tracks / f"{name}.txt"
            if not csv_path.exists():
                raise DataError(f"missing tracker output {csv_path}")
            try:
                rows = tracker.read_mot_csv(csv_path, width, height)
            except ValueError as e:
                raise DataError(str(e)) from None
            hyp_tables[name] = tracker.rows_to_table(rows)
            scores: dict[int, list[float]] = {}
            for r in rows:
                scores.setdefault(r.frame, []).append(r.score)
            hyp_scores[name] = scores
        try:
            report = evalkit.evaluate_tracking(gt_tables, hyp_tables, hyp_scores, args.iou_gate)
        except ValueError as e:
            raise DataError(str(e)) from None
        result["tracking"] = report.to_json()
    if model is not None:
        scenes = [(f.image, f.annotations) for frames in seqs.values() for f in frames]
        nms_thr = None if args.det_nms < 0 else args.det_nms
        gts, dets = evalkit.detection_outputs(model, scenes, cfg.seed, cfg.train["template_long_side"], nms_thr)
        ap, ar = evalkit.detection_pr(gts, dets, args.iou_gate)
        precision, recall, _ = evalkit.pr_curve(gts, dets, args.iou_gate)
        result["detection"] = evalkit.json_safe({"mAP50": ap, "mAR": ar, "nms_threshold": nms_thr})
        pr = {"precision": [round(float(p), 6) for p in precision], "recall": [round(float(r), 6) for r in recall]}
        (out / "pr.json").write_text(json.dumps(pr) + "\n")
    (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    finish_run(out)
    return out


def cmd_probe(args) -> Path:
    cfg = build_run_config(args, {})
    seqs = _sequences(args.data)
    model = _load_model(args.checkpoint, cfg)
    out = start_run(cfg, args.force)
    rng = np.random.default_rng(cfg.seed)
    sequences = [[(f.image, f.annotations) for f in frames] for frames in seqs.values()]
    fixed = None
    if args.template_box.startswith("index:"):
        fixed = int(args.template_box.split(":", 1)[1])
    items = evalkit.probe_items_from_sequences(sequences, rng, cfg.train["template_long_side"], fixed)
    if not items:
        raise DataError("no annotated frames to probe")
    conf, iou = evalkit.gt_query_probe(model, items)
    result = {"avg_confidence": round(conf, 6), "avg_iou": round(iou, 6), "num_items": len(items)}
    (out / "probe.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    finish_run(out)
    return out


_PALETTE = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
            (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212)]


def cmd_render(args) -> Path:
    from PIL import Image, ImageDraw

    cfg = build_run_config(args, {})
    seqs = _sequences(args.data)
    out = start_run(cfg, args.force)
    frames_out = out / "frames"
    count = 0
    for name, frames in seqs.items():
        width, height = _image_size(args.data, frames)
        hyp = None
        if args.tracks:
            path = Path(args.tracks) / f"{name}.txt"
            if not path.exists():
                raise DataError(f"missing tracker output {path}")
            hyp = tracker.rows_to_table(tracker.read_mot_csv(path, width, height))
        for f, rec in enumerate(frames, start=1):
            if args.limit and count >= args.limit:
                break
            img = Image.fromarray(rec.image).convert("RGB")
            draw = ImageDraw.Draw(img)
            if hyp is None:
                boxes = [(a.category_id, a.box) for a in rec.annotations]
            else:
                boxes = [(i, b) for i, b in hyp.get(f, [])]
            for key, box in boxes:
                x, y, w, h = tracker.to_pixels(box, width, height)
                draw.rectangle([x, y, x + w - 1, y + h - 1], outline=_PALETTE[key % len(_PALETTE)])
            frames_out.mkdir(parents=True, exist_ok=True)
            img.save(frames_out / f"{name}_{f:06d}.png")
            count += 1
    if args.log or args.pr:
        _plots(out, args.log, args.pr)
    finish_run(out)
    return out


def _plots(out: Path, log_path: str | None, pr_path: str | None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if log_path:
        recs = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line.strip()]
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot([r["step"] for r in recs], [r["total"] for r in recs], lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        fig.tight_layout()
        fig.savefig(out / "loss.png")
        plt.close(fig)
    if pr_path:
        pr = json.loads(Path(pr_path).read_text())
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(pr["recall"], pr["precision"], lw=1)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        fig.tight_layout()
        fig.savefig(out / "pr.png")
        plt.close(fig)


# -- parser ------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="run seed (falls back to $SQTK_SEED, then 0)")
    p.add_argument("--preset", default="toy_scale", choices=sorted(PRESETS), help="configuration preset")
    p.add_argument("--config", default=None, help="JSON file with scene/model/train/tracker overrides")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqtk", description="Template-conditioned detection and tracking.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene or sequence dataset")
    _common(p)
    p.add_argument("--kind", choices=("scenes", "sequences"), default="scenes")
    p.add_argument("--count", type=int, default=10, help="number of scenes or sequences")
    p.add_argument("--image-size", type=int, default=None, help="square image side in pixels")
    p.add_argument("--categories", default=None, help="comma-separated category ids to draw from")
    p.add_argument("--num-frames", type=int, default=None, help="frames per sequence")
    p.add_argument("--max-step", type=float, default=None, help="max per-frame displacement / object size")
    p.add_argument("--birth-prob", type=float, default=None, help="per-frame object birth probability")
    p.add_argument("--death-prob", type=float, default=None, help="per-frame object death probability")
    p.add_argument("--motion", choices=("linear", "curved"), default=None, help="motion model")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a scene dataset")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--templates", type=int, default=None, help="templates per image (T)")
    p.add_argument("--lr", type=float, default=None, help="initial learning rate")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--denoising", choices=("off", "original", "optimized"), default=None)
    p.add_argument("--negatives", choices=("on", "off"), default=None,
                   help="keep other-category annotations as negatives")
    p.add_argument("--scales", type=int, default=None, help="number of feature scales (S)")
    p.add_argument("--limit", type=int, default=0, help="use only the first N images")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track template-category objects through sequences")
    _common(p)
    p.add_argument("--data", required=True, help="sequence dataset directory")
    p.add_argument("--checkpoint", default=None, help="model file or training output directory")
    p.add_argument("--backend", choices=("model", "oracle"), default=None, help="scoring backend")
    p.add_argument("--confidence", type=float, default=None, help="confidence threshold")
    p.add_argument("--nms", type=float, default=None, help="NMS IoU threshold")
    p.add_argument("--template-box", default="random-gt", help="random-gt or index:k (first-frame object)")
    p.add_argument("--long-side", type=int, default=None, help="template long side in pixels")
    p.add_argument("--limit", type=int, default=0, help="track only the first N sequences")
    p.add_argument("--debug-masks", action="store_true", help="dump the query group mask as PGM")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracker output and/or a checkpoint's detections")
    _common(p)
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--tracks", default=None, help="directory of MOTChallenge CSVs from track")
    p.add_argument("--checkpoint", default=None, help="evaluate detection mAP of this model")
    p.add_argument("--iou-gate", type=float, default=0.5)
    p.add_argument("--det-nms", type=float, default=evalkit.DETECTION_NMS,
                   help="NMS threshold applied to detections before AP (negative: raw outputs)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="ground-truth boxes as query boxes")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", default=None, help="model to probe (default: freshly initialized)")
    p.add_argument("--template-box", default="random-gt", help="random-gt or index:k (first-frame object)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("render", help="draw boxes on frames and plot training/PR curves")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--tracks", default=None, help="draw tracker output instead of annotations")
    p.add_argument("--limit", type=int, default=0, help="render at most N frames")
    p.add_argument("--log", default=None, help="train_log.jsonl to plot")
    p.add_argument("--pr", default=None, help="pr.json from eval to plot")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # single-worker mode keeps seeded runs bit-reproducible
    torch.set_num_threads(1)
    try:
        args.seed = resolve_seed(args.seed)
        args.func(args)
    except UsageError as e:
        print(f"sqtk {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"sqtk {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"sqtk {args.command}: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
