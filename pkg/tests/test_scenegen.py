import json

import numpy as np
import pytest

from sqtk.geometry import Box, iou
from sqtk.scenegen import (
    CATEGORY_NAMES,
    Annotation,
    SceneConfig,
    SceneGenerationError,
    SequenceConfig,
    crop_template,
    generate_scene,
    generate_sequence,
    read_annotations,
    read_meta,
    template_size,
    write_scenes,
    write_sequences,
)


def test_empty_scene():
    img, anns = generate_scene(SceneConfig(objects_per_scene=(0, 0), seed=4))
    assert anns == []
    assert img.shape == (128, 128, 3) and img.dtype == np.uint8


def test_scene_determinism():
    a = generate_scene(SceneConfig(seed=11))
    b = generate_scene(SceneConfig(seed=11))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_annotation_json_round_trip():
    a = Annotation(Box(0.1, 0.2, 0.3, 0.4), 3, 7)
    assert Annotation.from_json(json.loads(json.dumps(a.to_json()))) == a


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pixel_support_oracle(seed):
    # Same seed without objects gives the identical background (separate streams);
    # with noise off, differing pixels are exactly the rendered shapes.
    cfg = SceneConfig(objects_per_scene=(12, 12), noise_std=0.0, seed=seed, object_size=(10, 20))
    img, anns = generate_scene(cfg)
    bg, _ = generate_scene(SceneConfig(objects_per_scene=(0, 0), noise_std=0.0, seed=seed))
    assert len(anns) == 12
    support = np.any(img != bg, axis=-1)
    n = cfg.image_size
    covered = np.zeros_like(support)
    for a in anns:
        cx, cy, w, h = a.box
        x0, y0 = int(round((cx - w / 2) * n)), int(round((cy - h / 2) * n))
        x1, y1 = int(round((cx + w / 2) * n)), int(round((cy + h / 2) * n))
        covered[max(0, y0 - 1) : y1 + 1, max(0, x0 - 1) : x1 + 1] = True
        ys, xs = np.nonzero(support[max(0, y0 - 1) : y1 + 1, max(0, x0 - 1) : x1 + 1])
        # tight: the shape reaches every side of its box within one pixel
        assert ys.min() + max(0, y0 - 1) <= y0 + 1 and ys.max() + max(0, y0 - 1) >= y1 - 2
        assert xs.min() + max(0, x0 - 1) <= x0 + 1 and xs.max() + max(0, x0 - 1) >= x1 - 2
    assert not np.any(support & ~covered)


def test_unsatisfiable_separation_names_constraint():
    cfg = SceneConfig(objects_per_scene=(40, 40), min_separation=0.2, seed=0)
    with pytest.raises(SceneGenerationError, match="min_separation"):
        generate_scene(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(image_size=16)
    with pytest.raises(ValueError):
        SceneConfig(objects_per_scene=(5, 2))
    with pytest.raises(ValueError):
        SequenceConfig(birth_prob=1.5)


def _track_boxes(frames):
    tracks = {}
    for f, (_, anns) in enumerate(frames):
        for a in anns:
            tracks.setdefault(a.track_id, []).append((f, a.box))
    return tracks


def test_static_when_max_step_zero():
    frames = generate_sequence(SequenceConfig(max_step=0.0, birth_prob=0, death_prob=0, num_frames=6, seed=2))
    for boxes in _track_boxes(frames).values():
        assert all(b == boxes[0][1] for _, b in boxes)


def test_no_births_or_deaths_spans_all_frames():
    cfg = SequenceConfig(birth_prob=0, death_prob=0, num_frames=12, seed=5)
    frames = generate_sequence(cfg)
    ids = {a.track_id for a in frames[0][1]}
    assert all({a.track_id for a in anns} == ids for _, anns in frames)


@pytest.mark.parametrize("seed", range(5))
def test_sequence_motion_bounds_and_ids(seed):
    cfg = SequenceConfig(seed=seed, num_frames=25)
    frames = generate_sequence(cfg)
    seen_dead = set()
    alive_prev = set()
    for _, anns in frames:
        ids = [a.track_id for a in anns]
        assert len(ids) == len(set(ids))
        assert not (set(ids) & seen_dead), "track id reused"
        seen_dead |= alive_prev - set(ids)
        alive_prev = set(ids)
    size = cfg.image_size
    for boxes in _track_boxes(frames).values():
        for (f0, a), (f1, b) in zip(boxes, boxes[1:]):
            assert f1 == f0 + 1
            step = np.hypot(b[0] - a[0], b[1] - a[1])
            assert step <= cfg.max_step * max(a[2], a[3]) + 1.5 / size
            assert iou(a, b) > 0


def test_sequence_determinism():
    a = generate_sequence(SequenceConfig(seed=3, num_frames=4))
    b = generate_sequence(SequenceConfig(seed=3, num_frames=4))
    assert all(np.array_equal(x[0], y[0]) and x[1] == y[1] for x, y in zip(a, b))


def test_crop_template_sizes():
    img = np.random.default_rng(0).integers(0, 255, (128, 128, 3), dtype=np.uint8)
    assert crop_template(img, (0.5, 0.5, 1.0, 1.0), 32).shape == (32, 32, 3)
    assert crop_template(img, (0.5, 0.5, 0.5, 0.25), 32).shape == (16, 32, 3)
    assert template_size(64, 32, 32) == (32, 16)
    a = crop_template(img, (0.3, 0.6, 0.2, 0.15), 32)
    assert np.array_equal(a, crop_template(img, (0.3, 0.6, 0.2, 0.15), 32))
    with pytest.raises(ValueError):
        crop_template(img, (2.0, 2.0, 0.1, 0.1), 32)


def _features(crop):
    """Mean colour plus low-order shape moments of the foreground."""
    pix = crop.reshape(-1, 3).astype(np.float64)
    border = np.concatenate([crop[0], crop[-1], crop[:, 0], crop[:, -1]]).astype(np.float64)
    bg = np.median(border, axis=0)
    fg = np.linalg.norm(crop.astype(np.float64) - bg, axis=-1) > 40
    h, w = fg.shape
    yy, xx = np.mgrid[0:h, 0:w]
    u, v = (xx + 0.5) / w - 0.5, (yy + 0.5) / h - 0.5
    m = fg.astype(np.float64)
    tot = m.sum() + 1e-9
    mean_col = (pix * m.reshape(-1, 1)).sum(0) / tot / 255.0
    r2 = (u**2 + v**2) * m
    moments = [m.mean(), r2.sum() / tot * 4, (np.abs(u) * m).sum() / tot, (np.abs(v) * m).sum() / tot,
               m[h // 2 - 1 : h // 2 + 1, w // 2 - 1 : w // 2 + 1].mean(), abs(np.log(w / h))]
    return np.concatenate([mean_col * 2, moments])


def test_category_separability():
    rng = np.random.default_rng(0)
    feats, labels = [], []
    cfg = SceneConfig(objects_per_scene=(4, 6), categories_per_scene=(3, 4), seed=0)
    while len(labels) < 1000:
        img, anns = generate_scene(cfg, np.random.default_rng(int(rng.integers(2**31))))
        for a in anns:
            feats.append(_features(crop_template(img, a.box, 32)))
            labels.append(a.category_id)
    x, y = np.array(feats[:1000]), np.array(labels[:1000])
    mu, sd = x[:500].mean(0), x[:500].std(0) + 1e-9
    z = (x - mu) / sd
    centroids = np.stack([z[:500][y[:500] == c].mean(0) for c in range(len(CATEGORY_NAMES))])
    pred = np.argmin(((z[500:, None] - centroids[None]) ** 2).sum(-1), 1)
    acc = float((pred == y[500:]).mean())
    assert acc >= 0.95, acc


def test_dataset_directories(tmp_path):
    write_scenes(tmp_path / "s", SceneConfig(seed=1), 2)
    recs = read_annotations(tmp_path / "s")
    assert len(recs) == 2 and recs[0].image.shape == (128, 128, 3)
    assert read_meta(tmp_path / "s")["kind"] == "scenes"
    first = (tmp_path / "s" / "annotations.jsonl").read_bytes()
    write_scenes(tmp_path / "s2", SceneConfig(seed=1), 2)
    assert (tmp_path / "s2" / "annotations.jsonl").read_bytes() == first
    write_sequences(tmp_path / "q", SequenceConfig(seed=1, num_frames=3), 2)
    recs = read_annotations(tmp_path / "q")
    assert len(recs) == 6 and recs[0].sequence == "0000" and recs[0].frame == 1
    assert (tmp_path / "q" / "frames" / "0001" / "000003.png").exists()
    write_scenes(tmp_path / "e", SceneConfig(seed=1), 0)
    assert read_annotations(tmp_path / "e") == [] and read_meta(tmp_path / "e")["count"] == 0
