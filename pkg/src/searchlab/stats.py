"""Hypothesis tests, effect sizes, and mixed-type distances used in the analysis."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as _sp

from . import kernels

MW_EXACT_LIMIT = 400  # |a| * |b| at or below this uses the exact null distribution


@dataclass(frozen=True)
class StatReport:
    test: str
    statistic: float
    raw_p: float
    adjusted_p: float | None = None
    effect_size: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    n_a: int = 0
    n_b: int = 0
    family: str = ""
    label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.raw_p <= 1.0:
            raise ValueError(f"p-value {self.raw_p} outside [0, 1]")
        if self.adjusted_p is not None and not 0.0 <= self.adjusted_p <= 1.0:
            raise ValueError(f"adjusted p-value {self.adjusted_p} outside [0, 1]")
        if self.ci_low is not None and self.ci_high is not None and self.ci_low > self.ci_high:
            raise ValueError("ci_low > ci_high")


def _arr(x, name: str, min_n: int = 1) -> np.ndarray:
    a = np.asarray(x, dtype=float).ravel()
    if a.size < min_n:
        raise ValueError(f"{name} needs at least {min_n} values, got {a.size}")
    return a


def _clip_p(p: float) -> float:
    return float(min(1.0, max(0.0, p)))


# ---------------------------------------------------------------------------
# two-sample comparisons
# ---------------------------------------------------------------------------

def bootstrap_ci(group_a, group_b, resamples: int = 10_000, seed: int = 0,
                 level: float = 0.95) -> StatReport:
    """Percentile CI for mean(a) - mean(b), resampling each group independently."""
    a = _arr(group_a, "group_a")
    b = _arr(group_b, "group_b")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, a.size, size=(resamples, a.size))
    ib = rng.integers(0, b.size, size=(resamples, b.size))
    diffs = a[ia].mean(axis=1) - b[ib].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(diffs, [tail, 100.0 - tail])
    p = 2.0 * min(np.mean(diffs <= 0), np.mean(diffs >= 0))
    p = min(1.0, max(1.0 / resamples, p))
    return StatReport("bootstrap_mean_diff", float(a.mean() - b.mean()), float(p),
                      ci_low=float(lo), ci_high=float(hi), n_a=a.size, n_b=b.size)


def welch_t(a, b) -> StatReport:
    x = _arr(a, "a", 2)
    y = _arr(b, "b", 2)
    va, vb = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    diff = x.mean() - y.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return StatReport("welch_t", 0.0, 1.0, n_a=x.size, n_b=y.size)
        return StatReport("welch_t", math.copysign(math.inf, diff), 0.0, n_a=x.size, n_b=y.size)
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (x.size - 1) + vb ** 2 / (y.size - 1))
    p = 2.0 * _sp.t.sf(abs(t), df)
    return StatReport("welch_t", float(t), _clip_p(p), n_a=x.size, n_b=y.size)


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    return _sp.rankdata(np.asarray(values, dtype=float), method="average")


def mann_whitney_u(a, b) -> StatReport:
    """U for group ``a`` (pairs where a beats b, ties counting half), two-sided p.

    Exact when |a|*|b| <= 400: all C(N, |a|) rank assignments are counted
    via doubled midranks, which keeps tied ranks integral. Otherwise a
    tie-corrected normal approximation with continuity correction.
    """
    x = _arr(a, "a")
    y = _arr(b, "b")
    na, nb = x.size, y.size
    ranks = midranks(np.concatenate([x, y]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2.0)
    mean_u = na * nb / 2.0
    if na * nb <= MW_EXACT_LIMIT:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        counts = kernels.rank_sum_counts(doubled, na)
        sums = np.arange(counts.size)
        centre = na * (na + nb + 1)  # doubled expected rank sum
        obs = int(doubled[:na].sum())
        extreme = np.abs(sums - centre) >= abs(obs - centre)
        p = counts[extreme].sum() / counts.sum()
        return StatReport("mann_whitney_u", u, _clip_p(p), n_a=na, n_b=nb, label="exact")
    n = na + nb
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float((tie_counts ** 3 - tie_counts).sum())
    var = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return StatReport("mann_whitney_u", u, 1.0, n_a=na, n_b=nb, label="normal")
    z = (abs(u - mean_u) - 0.5) / math.sqrt(var)
    p = 2.0 * _sp.norm.sf(max(z, 0.0))
    return StatReport("mann_whitney_u", u, _clip_p(p), n_a=na, n_b=nb, label="normal")


def fisher_exact(table) -> StatReport:
    """Two-sided Fisher test on a 2x2 table; statistic is the sample odds ratio."""
    t = np.asarray(table)
    if t.shape != (2, 2):
        raise ValueError("table must be 2x2")
    if np.any(t < 0) or not np.all(np.equal(np.mod(t, 1), 0)):
        raise ValueError("table entries must be non-negative integers")
    (a, b), (c, d) = t.astype(int).tolist()
    n = a + b + c + d
    if n == 0:
        raise ValueError("all-zero table")
    r1, c1 = a + b, a + c
    lo, hi = max(0, r1 + c1 - n), min(r1, c1)
    # Exact integer weights C(c1, x) C(n - c1, r1 - x); the common denominator cancels.
    weights = {x: math.comb(c1, x) * math.comb(n - c1, r1 - x) for x in range(lo, hi + 1)}
    w_obs = weights[a]
    p = sum(w for w in weights.values() if w <= w_obs) / sum(weights.values())
    odds = (a * d) / (b * c) if b * c else (math.inf if a * d else math.nan)
    return StatReport("fisher_exact", float(odds), _clip_p(p), n_a=r1, n_b=c + d)


def cohens_d(a, b) -> float:
    """Mean difference over sqrt((s_a^2 + s_b^2) / 2), the average-variance form."""
    x = _arr(a, "a", 2)
    y = _arr(b, "b", 2)
    denom = math.sqrt((x.var(ddof=1) + y.var(ddof=1)) / 2.0)
    if denom == 0.0:
        raise ValueError("both groups have zero variance")
    return float((x.mean() - y.mean()) / denom)


def spearman_rho(x, y) -> StatReport:
    """Pearson correlation of midranks, p from the t approximation."""
    xa = _arr(x, "x", 3)
    ya = _arr(y, "y", 3)
    if xa.size != ya.size:
        raise ValueError("x and y must have equal length")
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        raise ValueError("constant input vector")
    rx, ry = midranks(xa), midranks(ya)
    rx -= rx.mean()
    ry -= ry.mean()
    rho = float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = max(-1.0, min(1.0, rho))
    n = xa.size
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * _sp.t.sf(abs(t), n - 2)
    return StatReport("spearman_rho", rho, _clip_p(p), n_a=n, n_b=n)


# ---------------------------------------------------------------------------
# multiplicity and tails
# ---------------------------------------------------------------------------

def holm_bonferroni(raw_ps: Sequence[float]) -> list[float]:
    """Holm step-down adjustment, returned in input order."""
    ps = [float(p) for p in raw_ps]
    if any(not 0.0 <= p <= 1.0 for p in ps):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(ps)
    order = sorted(range(m), key=lambda i: ps[i])
    adj = [0.0] * m
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, ps[i] * (m - rank))
        adj[i] = min(1.0, running)
    return adj


def adjust_families(reports: Sequence[StatReport]) -> list[StatReport]:
    """Fill adjusted_p with Holm applied within each ``family`` (reports order kept)."""
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(reports):
        groups.setdefault(r.family, []).append(i)
    out = list(reports)
    for idx in groups.values():
        for i, p in zip(idx, holm_bonferroni([reports[i].raw_p for i in idx])):
            out[i] = replace(reports[i], adjusted_p=p)
    return out


def binomial_tail(k: int, n: int, p0: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p0), summed term by term."""
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    if not 0.0 < p0 < 1.0:
        raise ValueError("p0 must be in (0, 1)")
    if k == 0:
        return 1.0
    terms = [math.comb(n, i) * p0 ** i * (1.0 - p0) ** (n - i) for i in range(k, n + 1)]
    return min(1.0, math.fsum(terms))


# ---------------------------------------------------------------------------
# mixed-type distances and the clustering permutation test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureVector:
    numeric: Mapping[str, float] = field(default_factory=dict)
    categorical: Mapping[str, str] = field(default_factory=dict)
    label: str = ""

    def schema(self) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return tuple(sorted(self.numeric)), tuple(sorted(self.categorical))


def gower_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    """Pairwise Gower distances; numeric ranges come from ``vectors`` and zero-range features are dropped."""
    if len(vectors) < 2:
        raise ValueError("need at least two vectors")
    num_keys, cat_keys = vectors[0].schema()
    for v in vectors[1:]:
        if v.schema() != (num_keys, cat_keys):
            raise ValueError("feature vectors have different schemas")
    n = len(vectors)
    total = np.zeros((n, n))
    used = 0
    for key in num_keys:
        col = np.array([float(v.numeric[key]) for v in vectors])
        rng = col.max() - col.min()
        if rng == 0:
            continue
        total += np.abs(col[:, None] - col[None, :]) / rng
        used += 1
    for key in cat_keys:
        col = np.array([str(v.categorical[key]) for v in vectors], dtype=object)
        total += (col[:, None] != col[None, :]).astype(float)
        used += 1
    if used == 0:
        raise ValueError("every feature has zero range")
    out = total / used
    np.fill_diagonal(out, 0.0)
    return out


def cluster_ratio(matrix: np.ndarray, labels: Sequence) -> float:
    codes = _label_codes(labels)
    return float(kernels.permutation_ratios(np.ascontiguousarray(matrix, dtype=float), codes[None, :])[0])


def _label_codes(labels: Sequence) -> np.ndarray:
    index: dict = {}
    return np.array([index.setdefault(l, len(index)) for l in labels], dtype=np.int64)


def permutation_cluster_test(matrix, labels: Sequence, n_perm: int = 10_000, seed: int = 0) -> StatReport:
    """Ratio of mean cross-label to mean within-label distance, against label permutations.

    p = (1 + #{permuted ratio >= observed}) / (n_perm + 1).
    """
    dist = np.ascontiguousarray(matrix, dtype=float)
    n = dist.shape[0]
    if dist.shape != (n, n) or len(labels) != n:
        raise ValueError("matrix must be square with one label per row")
    codes = _label_codes(labels)
    sizes = np.bincount(codes)
    if sizes.size < 2 or sizes.min() < 2:
        raise ValueError("need at least two labels with at least two members each")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    observed = float(kernels.permutation_ratios(dist, codes[None, :])[0])
    rng = np.random.default_rng(seed)
    perms = np.ascontiguousarray(rng.permuted(np.tile(codes, (n_perm, 1)), axis=1))
    ratios = kernels.permutation_ratios(dist, perms)
    hits = int(np.sum(ratios >= observed))
    p = (1 + hits) / (n_perm + 1)
    return StatReport("permutation_cluster", observed, _clip_p(p), n_a=n, n_b=int(sizes.size))


STAT_COLUMNS = ("family", "test", "label", "statistic", "raw_p", "adjusted_p", "effect_size",
                "ci_low", "ci_high", "n_a", "n_b")


def stats_csv(reports: Sequence[StatReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STAT_COLUMNS)
    for r in reports:
        w.writerow(["" if getattr(r, c) is None else
                    (repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c))
                    for c in STAT_COLUMNS])
    return buf.getvalue()
