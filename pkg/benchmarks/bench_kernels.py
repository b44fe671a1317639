"""Time the numba and numpy implementations of the hot kernels side by side.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both paths are called directly, so the env flag does not matter here. The
numba columns exclude compilation (one warm-up call first).
"""

import argparse
import timeit

import numpy as np

from globaltrack import _accel, evaluation, geometry


def random_boxes(rng, n, size=800.0):
    xy = rng.uniform(0, size * 0.9, (n, 2))
    wh = rng.uniform(8, size * 0.3, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def bench(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    a, b = random_boxes(rng, 2000), random_boxes(rng, 50)
    nms_boxes = random_boxes(rng, 2000)
    scores = rng.random(2000)
    nms_sorted = nms_boxes[np.argsort(-scores, kind="stable")]
    ious = rng.random(100_000)

    cases = [
        ("iou_matrix 2000x50", geometry._iou_matrix_loops, geometry._iou_matrix_numpy, (a, b)),
        ("iou_aligned 2000", geometry._iou_aligned_loops, geometry._iou_aligned_numpy, (a, a[::-1].copy())),
        ("nms 2000 @0.7", geometry._nms_sorted_loops, geometry._nms_sorted_numpy, (nms_sorted, 0.7)),
        ("count_above 1e5x21", evaluation._count_above_loops, evaluation._count_above_numpy,
         (ious, evaluation.SUCCESS_THRESHOLDS)),
        ("count_at_most 1e5x51", evaluation._count_at_most_loops, evaluation._count_at_most_numpy,
         (ious * 50, evaluation.PRECISION_THRESHOLDS)),
    ]
    print(f"numba available: {_accel.HAS_NUMBA}")
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fast, slow, fargs in cases:
        t_slow = bench(slow, fargs, args.repeat)
        if _accel.HAS_NUMBA:
            ref, got = slow(*fargs), fast(*fargs)
            assert np.array_equal(np.asarray(ref), np.asarray(got)), name
            t_fast = bench(fast, fargs, args.repeat)
            print(f"{name:<24}{t_fast * 1e3:>10.3f}{t_slow * 1e3:>10.3f}{t_slow / t_fast:>8.1f}x")
        else:
            print(f"{name:<24}{'-':>10}{t_slow * 1e3:>10.3f}{'-':>9}")


if __name__ == "__main__":
    main()
