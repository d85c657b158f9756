"""Compare the compiled kernels with the numpy fallback.

Run with ``python benchmarks/bench_kernels.py``.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from psearch import _kernels_py as py

try:
    from psearch import _ckernels as cy
except ImportError:  # extension not built
    cy = None


def _boxes(rng, n, size=512.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(8, 64, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def cases(rng):
    boxes = _boxes(rng, 2000)
    scores = rng.random(2000)
    gt = _boxes(rng, 200)
    attn = rng.random((64, 64))
    attn[attn < 0.7] = 0.0
    peaks = py.local_maxima(attn, 3)
    return {
        "nms(2000 boxes)": lambda m: m.nms(boxes, scores, 0.5),
        "local_maxima(64x64, r=3)": lambda m: m.local_maxima(attn, 3),
        "peak_stds(64x64)": lambda m: m.peak_stds(attn, peaks, 3, 5.0),
        "greedy_match(2000 x 200)": lambda m: m.greedy_match(boxes, gt, 0.5, None),
        "box_iou(2000 x 200)": lambda m: m.box_iou(boxes, gt),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'python (ms)':>12s} {'cython (ms)':>12s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:28s} {t_py:12.3f} {'n/a':>12s}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {t_py:12.3f} {t_cy:12.3f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
