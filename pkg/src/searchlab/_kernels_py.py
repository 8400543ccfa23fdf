"""Reference numpy implementations of the compiled kernels."""

from __future__ import annotations

import numpy as np


def merge_pair(ids: np.ndarray, a: int, b: int, new_id: int) -> np.ndarray:
    """Replace non-overlapping (a, b) occurrences, scanning left to right."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 2:
        return ids.copy()
    hits = np.flatnonzero((ids[:-1] == a) & (ids[1:] == b))
    if hits.size == 0:
        return ids.copy()
    if a == b:
        # Inside a run of a's only every other start is taken.
        keep = []
        last = -2
        for h in hits.tolist():
            if h > last + 1:
                keep.append(h)
                last = h
        hits = np.asarray(keep, dtype=np.int64)
    out = ids.copy()
    out[hits] = new_id
    drop = np.zeros(ids.size, dtype=bool)
    drop[hits + 1] = True
    return out[~drop]


def rank_sum_counts(scores: np.ndarray, m: int) -> np.ndarray:
    """Number of m-subsets of ``scores`` attaining each possible total."""
    scores = np.asarray(scores, dtype=np.int64)
    total = int(scores.sum())
    dp = np.zeros((m + 1, total + 1))
    dp[0, 0] = 1.0
    for w in scores.tolist():
        if w == 0:
            dp[1:] = dp[1:] + dp[:-1]
        else:
            dp[1:, w:] = dp[1:, w:] + dp[:-1, :total + 1 - w]
    return dp[m].copy()


def permutation_ratios(dist: np.ndarray, label_perms: np.ndarray) -> np.ndarray:
    """Mean cross-label over mean within-label distance, one value per label row."""
    dist = np.asarray(dist, dtype=float)
    n = dist.shape[0]
    iu, ju = np.triu_indices(n, 1)
    d = dist[iu, ju]
    same = label_perms[:, iu] == label_perms[:, ju]
    n_within = same.sum(axis=1)
    n_cross = (~same).sum(axis=1)
    within = (same * d).sum(axis=1)
    cross = (~same * d).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (cross / n_cross) / (within / n_within)
    out = np.where((n_within == 0) | (n_cross == 0), np.nan, out)
    return out.astype(float)
