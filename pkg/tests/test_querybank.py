import numpy as np
import pytest
import torch

from sqtk.querybank import (
    DENOISE,
    DETECT,
    TRACK,
    NoiseConfig,
    QuerySet,
    build_denoising_queries,
    build_detection_queries,
    build_group_attention_mask,
    build_tracking_queries,
)
from sqtk.scenegen import Annotation, Box


def _pooled(s=4, d=8):
    return torch.arange(s, dtype=torch.float32)[:, None].repeat(1, d)


def test_detection_round_robin():
    pooled = _pooled()
    learned = torch.rand(12, 4)
    qs = build_detection_queries(pooled, learned)
    assert len(qs) == 12 and set(qs.roles) == {DETECT}
    for n, q in enumerate(qs):
        assert torch.equal(q.content, pooled[n % 4])
    # query n = 5 takes scale 1
    assert torch.equal(qs[5].content, pooled[1])


def test_detection_paper_scale_replication():
    qs = build_detection_queries(_pooled(), torch.rand(600, 4))
    counts = np.bincount([int(q.content[0]) for q in qs])
    assert counts.tolist() == [150, 150, 150, 150]


def test_detection_rejects_indivisible():
    with pytest.raises(ValueError):
        build_detection_queries(_pooled(), torch.rand(10, 4))


def test_tracking_layout():
    pooled = _pooled()
    qs = build_tracking_queries(pooled, [(0.2, 0.2, 0.1, 0.1), (0.7, 0.7, 0.2, 0.2)], track_ids=[5, 9])
    assert len(qs) == 8 and set(qs.roles) == {TRACK}
    q = qs[1 * 2 + 1]  # scale 1, second track
    assert q.scale == 1 and q.origin == 9
    assert torch.equal(q.content, pooled[1])
    assert q.box == pytest.approx((0.7, 0.7, 0.2, 0.2))
    assert len(build_tracking_queries(pooled, [])) == 0


def _anns():
    return [Annotation(Box(0.3, 0.3, 0.2, 0.2), 1), Annotation(Box(0.7, 0.6, 0.1, 0.3), 2),
            Annotation(Box(0.5, 0.8, 0.15, 0.1), 1)]


def test_denoising_optimized_labels_and_targets():
    pooled = _pooled()
    qs, tg = build_denoising_queries(_anns(), 1, pooled, rng=np.random.default_rng(0))
    assert len(qs) == 12 and set(qs.roles) == {DENOISE}
    assert tg.labels.tolist() == [1.0, 0.0, 1.0] * 4
    assert torch.allclose(tg.boxes[3], torch.tensor([0.3, 0.3, 0.2, 0.2]))  # scale 1, first box
    for i, q in enumerate(qs):
        assert torch.equal(q.content, pooled[i // 3])


def test_denoising_zero_noise_is_clean():
    qs, tg = build_denoising_queries(_anns(), 1, _pooled(), NoiseConfig(0.0, 0.0), np.random.default_rng(0))
    assert torch.allclose(qs.boxes, tg.boxes)


def test_denoising_empty_and_original_mode():
    qs, tg = build_denoising_queries([], 1, _pooled())
    assert len(qs) == 0 and len(tg.labels) == 0
    with pytest.raises(ValueError):
        build_denoising_queries(_anns(), 1, _pooled(), mode="original")
    emb = torch.nn.Embedding(10, 8)
    qs, tg = build_denoising_queries(_anns(), 1, _pooled(), rng=np.random.default_rng(0), mode="original",
                                     label_embed=emb)
    assert tg.labels.tolist() == [1.0, 0.0, 1.0] * 4
    with pytest.raises(ValueError):
        build_denoising_queries(_anns(), 1, _pooled(), mode="bogus")


def test_denoising_deterministic():
    a = build_denoising_queries(_anns(), 1, _pooled(), rng=np.random.default_rng(3))[0]
    b = build_denoising_queries(_anns(), 1, _pooled(), rng=np.random.default_rng(3))[0]
    assert torch.equal(a.boxes, b.boxes)


def test_group_mask():
    m = build_group_attention_mask([2, 3])
    expected = torch.tensor([[1, 1, 0, 0, 0], [1, 1, 0, 0, 0], [0, 0, 1, 1, 1], [0, 0, 1, 1, 1], [0, 0, 1, 1, 1]],
                            dtype=torch.bool)
    assert torch.equal(m, expected)
    assert build_group_attention_mask([4]).all()
    assert torch.equal(build_group_attention_mask([1, 1, 1]), torch.eye(3, dtype=torch.bool))
    with pytest.raises(ValueError):
        build_group_attention_mask([])
    with pytest.raises(ValueError):
        build_group_attention_mask([2, -1])


def test_queryset_cat_and_mask():
    pooled = _pooled()
    a = build_detection_queries(pooled, torch.rand(8, 4), group=0)
    b = build_tracking_queries(pooled, [(0.5, 0.5, 0.1, 0.1)], group=1)
    qs = QuerySet.cat([a, b])
    assert qs.group_sizes() == [8, 4]
    assert torch.equal(qs.attention_mask(), build_group_attention_mask([8, 4]))
    assert QuerySet.empty(8).group_sizes() == []
