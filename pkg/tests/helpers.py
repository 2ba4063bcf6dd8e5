"""Shared fixtures for the model and training tests."""

from __future__ import annotations

import numpy as np
import torch

from sqtk.model import ModelConfig, SiameseDETR
from sqtk.scenegen import SceneConfig, scene_dataset
from sqtk.training import TemplateBank, TrainConfig, batch_loss

MICRO = dict(hidden_dim=16, num_scales=2, num_queries=8, encoder_layers=1, decoder_layers=1,
             heads=2, ffn_dim=32, backbone_width=4)
GRAD_STEP = 1e-4
GRAD_TOL = 1e-3
# Denominator floor for the relative error; float64 central differences carry
# absolute noise of roughly eps * |loss| / h ~ 1e-11, far below this.
GRAD_FLOOR = 1e-6


def micro_model(seed: int = 0, **overrides) -> SiameseDETR:
    torch.manual_seed(seed)
    model = SiameseDETR(ModelConfig(**{**MICRO, **overrides})).double()
    # Non-zero deltas so the refinement path carries gradient everywhere.
    for p in model.head.parameters():
        torch.nn.init.normal_(p, std=0.05)
    return model


def micro_batch(count: int = 1, seed: int = 3):
    cfg = SceneConfig(image_size=32, object_size=(8, 14), objects_per_scene=(2, 3), categories_per_scene=(2, 2),
                      min_separation=0.0, seed=seed)
    ds = scene_dataset(cfg, count)
    return ds, [(i, img, anns) for i, (img, anns) in enumerate(ds)]


def micro_loss_fn(model, templates: int = 2, denoising: str = "optimized", seed: int = 0):
    ds, batch = micro_batch()
    bank = TemplateBank(ds, long_side=32)
    cfg = TrainConfig(templates=templates, denoising=denoising)

    def loss():
        return batch_loss(model, batch, bank, cfg, np.random.default_rng(seed))[0]

    return loss


def gradient_check(model, loss_fn, h: float = GRAD_STEP, floor: float = GRAD_FLOOR):
    """Max relative error between autograd and central differences over all parameters."""
    model.zero_grad()
    loss_fn().backward()
    worst, where, count = 0.0, None, 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                a = float(analytic[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                count += 1
                if err > worst:
                    worst, where = err, (name, i, a, numeric)
    return worst, where, count


def random_mot_fixture(rng: np.random.Generator, max_objects: int = 4, max_frames: int = 12):
    """Small GT/hypothesis frame tables with jitter, misses, false alarms and id swaps."""
    n_frames = int(rng.integers(1, max_frames + 1))
    n_obj = int(rng.integers(1, max_objects + 1))
    centers = rng.uniform(0.2, 0.8, (n_obj, 2))
    vel = rng.uniform(-0.04, 0.04, (n_obj, 2))
    sizes = rng.uniform(0.08, 0.25, (n_obj, 2))
    span = [sorted(rng.integers(0, n_frames, 2)) for _ in range(n_obj)]
    hyp_id = list(range(10, 10 + n_obj))
    gt, hyp = {}, {}
    for f in range(n_frames):
        g_rows, h_rows = [], []
        if rng.random() < 0.15 and n_obj > 1:  # identity swap
            i, j = rng.choice(n_obj, 2, replace=False)
            hyp_id[i], hyp_id[j] = hyp_id[j], hyp_id[i]
        for k in range(n_obj):
            if not span[k][0] <= f <= span[k][1]:
                continue
            c = centers[k] + vel[k] * f
            box = (float(c[0]), float(c[1]), float(sizes[k][0]), float(sizes[k][1]))
            g_rows.append((k, box))
            if rng.random() < 0.8:
                jit = rng.normal(0, 0.03, 4) * np.r_[sizes[k], sizes[k]]
                h_rows.append((hyp_id[k], tuple(float(v) for v in np.add(box, jit).clip(0.01, 1))))
        if rng.random() < 0.3:
            h_rows.append((99, (float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)), 0.15, 0.15)))
        gt[f + 1] = g_rows
        hyp[f + 1] = h_rows
    return gt, hyp
