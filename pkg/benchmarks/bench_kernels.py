"""Compare the compiled kernels with the pure-Python fallback.

Workloads mirror the hot paths: per-layer Hungarian matching during training
(96 queries vs up to 8 targets), NMS over a frame's detections, and the IoU
matrices used by tracking and CLEAR-MOT.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from sqtk import _fallback

try:
    from sqtk import _kernels
except ImportError:
    _kernels = None


def random_boxes(rng, n):
    return np.column_stack([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.02, 0.3, (n, 2))])


def workloads(rng):
    cost = rng.random((96, 8))
    boxes = random_boxes(rng, 96)
    scores = rng.random(96)
    a, b = random_boxes(rng, 50), random_boxes(rng, 50)
    big = rng.random((200, 200))
    return {
        "assignment 96x8": lambda m: m.linear_sum_assignment(cost),
        "assignment 200x200": lambda m: m.linear_sum_assignment(big),
        "nms n=96": lambda m: m.nms(boxes, scores, 0.5),
        "iou 50x50": lambda m: m.iou_matrix(a, b),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'workload':<22}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in workloads(rng).items():
        py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _kernels is None:
            print(f"{name:<22}{py:>12.3f}{'n/a':>12}{'':>10}")
            continue
        cy = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{py:>12.3f}{cy:>12.3f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
