import numpy as np
import pytest

from sqtk import _fallback, kernels

scipy_opt = pytest.importorskip("scipy.optimize")

try:
    from sqtk import _kernels
except ImportError:  # extension not built
    _kernels = None

backends = [_fallback] + ([_kernels] if _kernels is not None else [])


@pytest.mark.parametrize("impl", backends, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_assignment_matches_scipy(impl):
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, m = rng.integers(1, 9, size=2)
        cost = rng.normal(size=(n, m))
        rows, cols = impl.linear_sum_assignment(cost)
        r2, c2 = scipy_opt.linear_sum_assignment(cost)
        assert cost[rows, cols].sum() == pytest.approx(cost[r2, c2].sum(), abs=1e-9)
        assert len(rows) == min(n, m)
        assert list(rows) == sorted(rows)
        assert len(set(cols.tolist())) == len(cols)


@pytest.mark.parametrize("impl", backends, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_assignment_rejects_non_finite(impl):
    with pytest.raises(ValueError):
        impl.linear_sum_assignment(np.array([[np.nan, 1.0]]))


def test_assignment_empty():
    rows, cols = kernels.linear_sum_assignment(np.zeros((0, 3)))
    assert len(rows) == len(cols) == 0


@pytest.mark.skipif(_kernels is None, reason="extension not built")
def test_backends_agree_on_nms_and_iou():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(0, 30))
        boxes = np.column_stack([rng.random((n, 2)), rng.uniform(0.02, 0.4, (n, 2))])
        scores = rng.random(n).round(2)  # ties exercise the index tie-break
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        assert list(_kernels.nms(boxes, scores, thr)) == list(_fallback.nms(boxes, scores, thr))
        other = boxes[::-1].copy()
        assert np.allclose(_kernels.iou_matrix(boxes, other), _fallback.iou_matrix(boxes, other), atol=1e-14)


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "python")
