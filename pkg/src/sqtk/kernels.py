"""Backend selection for the box/assignment kernels.

The Cython extension ``sqtk._kernels`` is used when it was built; otherwise the
pure-Python implementations in ``sqtk._fallback`` are used. Setting
``SQTK_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _fallback

if os.environ.get("SQTK_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def _as_boxes(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) box array, got shape {arr.shape}")
    return arr


def iou_matrix(a, b):
    """Pairwise IoU between two (n, 4) / (m, 4) center-format box arrays."""
    return _impl.iou_matrix(_as_boxes(a), _as_boxes(b))


def nms_indices(boxes, scores, threshold):
    boxes = _as_boxes(boxes)
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    return _impl.nms(boxes, scores, float(threshold))


def linear_sum_assignment(cost):
    """Exact minimum-cost assignment on a rectangular matrix.

    Returns ``(rows, cols)`` sorted by row; ``min(n, m)`` pairs are produced.
    """
    return _impl.linear_sum_assignment(cost)
