"""Compiled vs pure-Python kernels, plus one training step for scale.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints best-of-N wall time per kernel and backend, checks the two backends
agree, and times a desk-scale training step (numpy/BLAS in both backends).
"""

import argparse
import time

import numpy as np

from searchlab import _kernels_py

try:
    from searchlab import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def cases(rng):
    ids = rng.integers(0, 4, size=200_000)
    scores = np.rint(2 * rng.permutation(np.arange(1, 41))).astype(np.int64)
    n = 60
    pts = rng.normal(size=(n, 3))
    dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    labels = np.repeat(np.arange(3), n // 3)
    perms = np.ascontiguousarray(rng.permuted(np.tile(labels, (2000, 1)), axis=1))
    return {
        "merge_pair (200k ids)": ("merge_pair", (ids, 1, 2, 99)),
        "rank_sum_counts (40 ranks, m=20)": ("rank_sum_counts", (scores, 20)),
        "permutation_ratios (60 pts, 2000 perms)": ("permutation_ratios", (dist, perms)),
    }


def training_step_time(repeat):
    from searchlab.config import DESK_TRACKS, default_hp, desk_arch
    from searchlab.data import load_track
    from searchlab.trainer import Budget, train_model

    track = load_track(DESK_TRACKS["smiles_like"], seed=0, n_synthetic=400)
    arch, hp = desk_arch(track.track), default_hp(track.track)
    t, _ = best_of(lambda: train_model(arch, hp, track.corpus, Budget(steps=20), 0), repeat)
    return t / 20


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':42s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for label, (name, fargs) in cases(rng).items():
        tp, ref = best_of(lambda: getattr(_kernels_py, name)(*fargs), args.repeat)
        if _kernels is None:
            print(f"{label:42s} {tp * 1e3:9.2f}ms {'n/a':>10s}")
            continue
        tc, out = best_of(lambda: getattr(_kernels, name)(*fargs), args.repeat)
        if not np.allclose(out, ref, rtol=1e-12, atol=0):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{label:42s} {tp * 1e3:9.2f}ms {tc * 1e3:9.2f}ms {tp / tc:7.1f}x")
    print(f"{'training step (depth 2, width 32)':42s} {training_step_time(2) * 1e3:9.2f}ms  (BLAS-bound, same in both)")


if __name__ == "__main__":
    main()
