import math

import numpy as np
import pytest
import torch

from sqtk.evalkit import (
    ProbeItem,
    clear_mot,
    detection_pr,
    evaluate_detection,
    evaluate_tracking,
    gated_assignment,
    gt_query_probe,
    idf1,
    json_safe,
    probe_items_from_sequences,
)
from sqtk.model import ModelConfig, SiameseDETR
from sqtk.scenegen import SceneConfig, SequenceConfig, scene_dataset, sequence_dataset

import oracles
from helpers import random_mot_fixture

# frozen oracle outputs
MISSED_FRAME_MOTA = 0.9
CROSSING_IDSW = 2


def _track(n, box=(0.5, 0.5, 0.2, 0.2), tid=1):
    return {f: [(tid, box)] for f in range(1, n + 1)}


def _crossing():
    gt, hyp = {}, {}
    for f in range(1, 11):
        x = 0.2 + 0.06 * (f - 1)
        a, b = (x, 0.5, 0.1, 0.1), (1.0 - x, 0.5, 0.1, 0.1)
        gt[f] = [(1, a), (2, b)]
        # hypothesis ids swap after the objects pass each other
        hyp[f] = [(7, a), (8, b)] if f <= 5 else [(8, a), (7, b)]
    return gt, hyp


def test_frozen_values_match_oracle():
    gt = _track(10)
    hyp = {f: v for f, v in _track(10).items() if f != 4}
    ref = oracles.clear_mot_reference(gt, hyp)
    assert ref["mota"] == pytest.approx(MISSED_FRAME_MOTA) and ref["fn"] == 1
    gt, hyp = _crossing()
    assert oracles.clear_mot_reference(gt, hyp)["idsw"] == CROSSING_IDSW


def test_identity_tracking():
    gt = {1: [(1, (0.2, 0.2, 0.1, 0.1)), (2, (0.6, 0.6, 0.2, 0.2))], 2: [(1, (0.22, 0.2, 0.1, 0.1))]}
    cm = clear_mot(gt, gt)
    assert (cm.mota, cm.fp, cm.fn, cm.idsw, cm.mt) == (1.0, 0, 0, 0, 2)


def test_missed_frame():
    hyp = {f: v for f, v in _track(10).items() if f != 4}
    cm = clear_mot(_track(10), hyp)
    assert cm.mota == pytest.approx(MISSED_FRAME_MOTA) and cm.fn == 1


def test_crossing_swap():
    gt, hyp = _crossing()
    cm = clear_mot(gt, hyp)
    assert cm.idsw == CROSSING_IDSW


def test_duplicate_hypothesis_ids_rejected():
    with pytest.raises(ValueError):
        clear_mot(_track(1), {1: [(3, (0.5, 0.5, 0.1, 0.1)), (3, (0.2, 0.2, 0.1, 0.1))]})


def test_gated_assignment_vs_exhaustive():
    rng = np.random.default_rng(0)
    for _ in range(300):
        iou = rng.random((int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        iou[rng.random(iou.shape) < 0.3] = 0.0
        got = gated_assignment(iou, 0.5)
        ref = oracles._best_gated_matching(iou.tolist(), 0.5)
        assert len(got) == len(ref)
        assert sum(iou[r, c] for r, c in got) == pytest.approx(sum(iou[r, c] for r, c in ref), abs=1e-12)


def test_clear_mot_matches_reference_on_fixtures():
    rng = np.random.default_rng(1)
    for _ in range(100):
        gt, hyp = random_mot_fixture(rng)
        cm = clear_mot(gt, hyp)
        ref = oracles.clear_mot_reference(gt, hyp)
        assert (cm.fp, cm.fn, cm.idsw, cm.mt, cm.ml, cm.num_gt) == (
            ref["fp"], ref["fn"], ref["idsw"], ref["mt"], ref["ml"], ref["num_gt"])
        assert cm.mota == pytest.approx(1 - (cm.fp + cm.fn + cm.idsw) / cm.num_gt, abs=0)


def test_idf1_examples():
    gt = _track(10)
    assert idf1(gt, gt) == 1.0
    assert idf1(gt, {}) == 0.0
    half = {f: v for f, v in _track(10, tid=5).items() if f <= 5}
    assert idf1(gt, half) == pytest.approx(2 / 3)


def test_idf1_invariant_to_id_relabeling():
    rng = np.random.default_rng(2)
    for _ in range(30):
        gt, hyp = random_mot_fixture(rng)
        ids = sorted({i for rows in hyp.values() for i, _ in rows})
        perm = dict(zip(ids, rng.permutation(ids).tolist()))
        relabeled = {f: [(perm[i], b) for i, b in rows] for f, rows in hyp.items()}
        assert idf1(gt, relabeled) == pytest.approx(idf1(gt, hyp), abs=1e-12)


def test_detection_pr_examples():
    g = [np.array([[0.5, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]])]
    assert detection_pr(g, [(g[0], np.ones(2))]) == (pytest.approx(1.0), 1.0)
    assert detection_pr(g, [(np.zeros((0, 4)), np.zeros(0))]) == (0.0, 0.0)
    one = [np.array([[0.5, 0.5, 0.2, 0.2]])]
    near = (0.5, 0.5, 0.2, 0.2 * 0.8)  # IoU 0.8
    dets = [(np.array([near, (0.1, 0.9, 0.05, 0.05)]), np.array([0.9, 0.5]))]
    ap, ar = detection_pr(one, dets)
    assert ap == pytest.approx(1.0) and ar == 1.0


def test_detection_ap_invariant_to_monotone_scores():
    rng = np.random.default_rng(3)
    gts, dets = [], []
    for _ in range(10):
        g = np.column_stack([rng.random((3, 2)), rng.uniform(0.05, 0.3, (3, 2))])
        d = np.vstack([g + rng.normal(0, 0.02, g.shape), np.column_stack([rng.random((4, 2)), np.full((4, 2), 0.1)])])
        gts.append(g)
        dets.append((d, rng.random(len(d))))
    base = detection_pr(gts, dets)
    warped = detection_pr(gts, [(b, np.exp(3 * s) - 0.5) for b, s in dets])
    assert warped == base


def test_evaluate_tracking_report():
    gt = _track(10)
    hyp = {f: v for f, v in _track(10, tid=3).items() if f != 4}
    rep = evaluate_tracking({"a": gt}, {"a": hyp})
    assert rep.MOTA == pytest.approx(1 - (rep.FP + rep.FN + rep.IDSw) / rep.num_gt)
    assert rep.MT + rep.ML <= rep.num_trajectories
    assert json_safe({"x": math.nan, "y": np.float64(2.0)}) == {"x": None, "y": 2.0}


def test_gt_query_probe_identity_at_init():
    torch.manual_seed(0)
    model = SiameseDETR(ModelConfig(hidden_dim=32, num_queries=16, backbone_width=8))
    seqs = sequence_dataset(SequenceConfig(seed=4, num_frames=3), 2)
    items = probe_items_from_sequences(seqs, np.random.default_rng(0))
    conf, avg_iou = gt_query_probe(model, items)
    assert avg_iou == pytest.approx(1.0, abs=1e-5)
    assert 0 < conf < 1
    with pytest.raises(ValueError):
        gt_query_probe(model, [])


def test_evaluate_detection_runs():
    torch.manual_seed(0)
    model = SiameseDETR(ModelConfig(hidden_dim=32, num_queries=16, backbone_width=8))
    ap, ar = evaluate_detection(model, scene_dataset(SceneConfig(seed=5), 3))
    assert 0.0 <= ap <= 1.0 and 0.0 <= ar <= 1.0
