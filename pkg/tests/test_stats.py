import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sp

from searchlab.stats import (FeatureVector, StatReport, adjust_families, binomial_tail, bootstrap_ci,
                             cohens_d, fisher_exact, gower_matrix, holm_bonferroni, mann_whitney_u,
                             midranks, permutation_cluster_test, spearman_rho, stats_csv, welch_t)

NLP_AGENT_AUC = [112.78, 113.81, 112.73, 112.97, 113.71]
NLP_HP_AUC = [114.75, 114.90, 114.89]


# -- Mann-Whitney ----------------------------------------------------------

def enumerate_mw_p(a, b):
    """Two-sided p by listing every assignment of the pooled values to group a."""
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    na = len(a)
    centre = na * (len(pooled) + 1) / 2.0
    obs = abs(ranks[:na].sum() - centre)
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), na):
        total += 1
        if abs(ranks[list(idx)].sum() - centre) >= obs - 1e-9:
            hits += 1
    return hits / total


@pytest.mark.parametrize("na,nb", [(i, j) for i in range(1, 6) for j in range(1, 6)])
def test_mann_whitney_exact_matches_enumeration(na, nb):
    rng = np.random.default_rng(100 * na + nb)
    for trial in range(6):
        # alternate continuous data and heavily tied data
        if trial % 2:
            a, b = rng.integers(0, 3, na).astype(float), rng.integers(0, 3, nb).astype(float)
        else:
            a, b = rng.normal(size=na), rng.normal(0.5, size=nb)
        r = mann_whitney_u(a, b)
        assert r.label == "exact"
        assert r.raw_p == pytest.approx(enumerate_mw_p(a, b), abs=1e-12)


def test_mann_whitney_examples():
    r = mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert r.statistic == 0.0
    assert r.raw_p == pytest.approx(2 / math.comb(6, 3))
    same = mann_whitney_u([1, 2, 3], [1, 2, 3])
    assert same.statistic == 4.5


@given(st.lists(st.integers(0, 5), min_size=1, max_size=8), st.lists(st.integers(0, 5), min_size=1, max_size=8))
def test_mann_whitney_u_identity(a, b):
    assert mann_whitney_u(a, b).statistic + mann_whitney_u(b, a).statistic == pytest.approx(len(a) * len(b))


def test_mann_whitney_normal_path_close_to_scipy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=30), rng.normal(0.4, size=25)
    r = mann_whitney_u(a, b)
    assert r.label == "normal"
    ref = sp.mannwhitneyu(a, b, method="asymptotic", use_continuity=True)
    assert r.statistic == pytest.approx(ref.statistic)
    assert r.raw_p == pytest.approx(ref.pvalue, rel=1e-9)


# -- Fisher ----------------------------------------------------------------

def hypergeom_p(a, b, c, d):
    r1, c1, n = a + b, a + c, a + b + c + d
    support = range(max(0, r1 + c1 - n), min(r1, c1) + 1)
    pmf = {x: sp.hypergeom.pmf(x, n, c1, r1) for x in support}
    return sum(p for p in pmf.values() if p <= pmf[a] * (1 + 1e-7))


def test_fisher_matches_enumeration_all_small_tables():
    checked = 0
    for r1 in range(13):
        for r2 in range(13):
            for a in range(r1 + 1):
                for c in range(r2 + 1):
                    b, d = r1 - a, r2 - c
                    if a + b + c + d == 0 or a + c > 12 or b + d > 12:
                        continue
                    assert fisher_exact([[a, b], [c, d]]).raw_p == pytest.approx(hypergeom_p(a, b, c, d),
                                                                                 rel=1e-9, abs=1e-15)
                    checked += 1
    assert checked > 5000


def test_fisher_examples_and_symmetry():
    assert fisher_exact([[1, 1], [1, 1]]).raw_p == pytest.approx(1.0)
    assert fisher_exact([[5, 0], [0, 5]]).raw_p == pytest.approx(2 / math.comb(10, 5))
    t = [[3, 7], [8, 2]]
    swapped = [[2, 8], [7, 3]]
    assert fisher_exact(t).raw_p == pytest.approx(fisher_exact(swapped).raw_p)
    with pytest.raises(ValueError):
        fisher_exact([[0, 0], [0, 0]])


# -- t, d, rho -------------------------------------------------------------

def test_welch_examples():
    r = welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert r.statistic == pytest.approx(-1.0)
    assert welch_t([1, 2, 3], [1, 2, 3]).raw_p == pytest.approx(1.0)
    assert welch_t([4, 4], [4, 4]).raw_p == 1.0
    ref = sp.ttest_ind([1.0, 2.5, 3, 4.2], [2, 7, 9, 9.5, 11], equal_var=False)
    r = welch_t([1.0, 2.5, 3, 4.2], [2, 7, 9, 9.5, 11])
    assert r.statistic == pytest.approx(ref.statistic)
    assert r.raw_p == pytest.approx(ref.pvalue)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8), st.lists(st.floats(-100, 100), min_size=2, max_size=8))
def test_welch_antisymmetry(a, b):
    if np.var(a) + np.var(b) == 0:
        return
    assert welch_t(a, b).statistic == pytest.approx(-welch_t(b, a).statistic)


def test_cohens_d_table_values():
    assert cohens_d(NLP_AGENT_AUC, NLP_HP_AUC) == pytest.approx(-4.42, abs=0.01)
    assert cohens_d([1, 2, 3], [1, 2, 3]) == 0.0
    with pytest.raises(ValueError):
        cohens_d([1, 1], [2, 2])


@given(st.floats(0.01, 100))
def test_cohens_d_scale_invariant(k):
    a, b = np.array([1.0, 2.0, 4.0]), np.array([2.0, 5.0, 5.5, 7.0])
    assert cohens_d(k * a, k * b) == pytest.approx(cohens_d(a, b))


def test_spearman_examples():
    assert spearman_rho([1, 2, 3], [3, 1, 2]).statistic == pytest.approx(-0.5)
    assert spearman_rho([1, 5, 2, 8], [1, 5, 2, 8]).statistic == pytest.approx(1.0)
    assert spearman_rho([1, 5, 2, 8], [-1, -5, -2, -8]).statistic == pytest.approx(-1.0)
    x, y = [1, 4, 2, 8, 5, 7], [2, 3, 1, 9, 4, 4]
    ref = sp.spearmanr(x, y)
    assert spearman_rho(x, y).statistic == pytest.approx(ref.statistic)
    assert spearman_rho(x, y).raw_p == pytest.approx(ref.pvalue)
    with pytest.raises(ValueError):
        spearman_rho([1, 1, 1], [1, 2, 3])


# -- multiplicity, tails ---------------------------------------------------

def test_holm_example():
    assert holm_bonferroni([0.01, 0.04, 0.03]) == pytest.approx([0.03, 0.06, 0.06])
    assert holm_bonferroni([0.2]) == [0.2]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_holm_dominates_raw(ps):
    adj = holm_bonferroni(ps)
    assert all(r <= a + 1e-15 and a <= 1.0 for r, a in zip(ps, adj))
    order = np.argsort(ps, kind="stable")
    assert all(np.diff(np.array(adj)[order]) >= -1e-15)


def test_adjust_families_groups_by_family():
    reps = [StatReport("t", 0, 0.01, family="x"), StatReport("t", 0, 0.02, family="y"),
            StatReport("t", 0, 0.03, family="x")]
    out = adjust_families(reps)
    assert [r.adjusted_p for r in out] == pytest.approx([0.02, 0.02, 0.03])


def test_binomial_tail():
    assert binomial_tail(41, 41, 0.35) == pytest.approx(0.35 ** 41)
    assert 1.6e-19 <= binomial_tail(41, 41, 0.35) <= 2.6e-19
    assert binomial_tail(0, 10, 0.3) == 1.0
    assert binomial_tail(1, 1, 0.5) == 0.5
    for k in range(11):
        assert binomial_tail(k, 10, 0.3) == pytest.approx(sp.binom.sf(k - 1, 10, 0.3), rel=1e-12)


# -- bootstrap --------------------------------------------------------------

def test_bootstrap_zero_variance():
    r = bootstrap_ci([5, 5, 5], [5, 5, 5], 1000, seed=1)
    assert (r.ci_low, r.ci_high, r.raw_p) == (0.0, 0.0, 1.0)


def test_bootstrap_separated_groups():
    a = [10.0, 10.1, 9.9, 10.05]
    b = [0.0, 0.1, -0.1, 0.05]
    for n in (1000, 10_000):
        r = bootstrap_ci(a, b, n, seed=3)
        assert r.ci_low > 0
        assert r.raw_p == pytest.approx(1.0 / n)


def test_bootstrap_seeded():
    a, b = [1, 2, 3, 5], [2, 2, 4]
    assert bootstrap_ci(a, b, 500, 7) == bootstrap_ci(a, b, 500, 7)


# -- Gower and permutation ---------------------------------------------------

def fv(num, cat, label=""):
    return FeatureVector(num, cat, label)


def test_gower_examples():
    same = [fv({"x": 1.0}, {"c": "a"}), fv({"x": 1.0}, {"c": "a"}), fv({"x": 3.0}, {"c": "a"})]
    assert gower_matrix(same)[0, 1] == 0.0
    cat = gower_matrix([fv({}, {"a": "x", "b": "y"}), fv({}, {"a": "z", "b": "w"})])
    assert cat[0, 1] == 1.0
    mixed = gower_matrix([fv({"x": 0.0}, {"c": "a"}), fv({"x": 5.0}, {"c": "a"}), fv({"x": 10.0}, {"c": "b"})])
    assert mixed[0, 1] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        gower_matrix([fv({"x": 1.0}, {}), fv({"x": 1.0}, {})])
    with pytest.raises(ValueError):
        gower_matrix([fv({"x": 1.0}, {}), fv({"y": 1.0}, {})])


@given(st.lists(st.tuples(st.floats(0, 10), st.sampled_from("abc")), min_size=2, max_size=8))
def test_gower_is_a_bounded_symmetric_dissimilarity(rows):
    vecs = [fv({"x": x}, {"c": c}) for x, c in rows]
    m = gower_matrix(vecs)
    assert np.allclose(m, m.T)
    assert np.all(np.diag(m) == 0)
    assert np.all((m >= 0) & (m <= 1 + 1e-12))


def separated(n0, n1, within=0.1, cross=10.0):
    labels = [0] * n0 + [1] * n1
    n = n0 + n1
    d = np.array([[0.0 if i == j else (within if labels[i] == labels[j] else cross)
                   for j in range(n)] for i in range(n)])
    return d, labels


def test_permutation_floor_on_separated_clusters():
    # Unequal sizes: with equal sizes the label swap reproduces the observed partition.
    d, labels = separated(10, 12)
    r = permutation_cluster_test(d, labels, 2000, seed=0)
    assert r.statistic == pytest.approx(100.0)
    assert r.raw_p == pytest.approx(1 / 2001)


@given(st.integers(0, 10_000))
def test_permutation_p_never_below_floor(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((8, 2))
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    r = permutation_cluster_test(d, [0, 0, 0, 0, 1, 1, 1, 1], 99, seed)
    assert 1 / 100 <= r.raw_p <= 1.0


def test_permutation_p_uniform_under_null():
    ps = []
    for rep in range(200):
        rng = np.random.default_rng(rep)
        x = rng.normal(size=(12, 3))
        d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
        ps.append(permutation_cluster_test(d, [0] * 6 + [1] * 6, 199, seed=rep).raw_p)
    assert sp.kstest(ps, "uniform").pvalue > 0.01


def test_permutation_degenerate_labels():
    d, _ = separated(3, 3)
    with pytest.raises(ValueError):
        permutation_cluster_test(d, [0, 0, 0, 0, 0, 1], 10)


def test_stats_csv_has_header_and_rows():
    text = stats_csv([StatReport("t", 1.5, 0.2, family="f")])
    lines = text.splitlines()
    assert lines[0].startswith("family,test")
    assert lines[1].startswith("f,t,")
