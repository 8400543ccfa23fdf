import numpy as np
import pytest
from hypothesis import given, strategies as st

from searchlab import _kernels_py, kernels

compiled = pytest.importorskip("searchlab._kernels")

ids_st = st.lists(st.integers(0, 4), max_size=60).map(lambda xs: np.array(xs, dtype=np.int64))


def test_backend_is_reported():
    assert kernels.BACKEND in ("compiled", "python")


@given(ids_st, st.integers(0, 4), st.integers(0, 4))
def test_merge_pair_parity(ids, a, b):
    np.testing.assert_array_equal(compiled.merge_pair(ids, a, b, 99), _kernels_py.merge_pair(ids, a, b, 99))


def test_merge_pair_runs_are_left_to_right():
    ids = np.array([1, 1, 1, 2, 1, 1], dtype=np.int64)
    for impl in (compiled, _kernels_py):
        assert impl.merge_pair(ids, 1, 1, 7).tolist() == [7, 1, 2, 7]


@given(st.lists(st.integers(0, 12), min_size=1, max_size=12), st.data())
def test_rank_sum_counts_parity(scores, data):
    m = data.draw(st.integers(0, len(scores)))
    s = np.array(scores, dtype=np.int64)
    np.testing.assert_array_equal(compiled.rank_sum_counts(s, m), _kernels_py.rank_sum_counts(s, m))


def test_rank_sum_counts_small_case():
    # subsets of {1,2,3} of size 2: sums 3, 4, 5
    out = _kernels_py.rank_sum_counts(np.array([1, 2, 3]), 2)
    assert out.tolist() == [0, 0, 0, 1, 1, 1, 0]


@given(st.integers(4, 10), st.integers(0, 2**31 - 1))
def test_permutation_ratio_parity(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3))
    d = np.ascontiguousarray(np.abs(x[:, None, :] - x[None, :, :]).sum(-1))
    labels = np.ascontiguousarray(rng.integers(0, 3, size=(20, n)).astype(np.int64))
    np.testing.assert_allclose(compiled.permutation_ratios(d, labels),
                               _kernels_py.permutation_ratios(d, labels), rtol=1e-12, equal_nan=True)


def test_permutation_ratio_degenerate_labels():
    d = np.ones((3, 3)) - np.eye(3)
    all_same = np.zeros((1, 3), dtype=np.int64)
    all_diff = np.arange(3, dtype=np.int64)[None, :]
    for impl in (compiled, _kernels_py):
        assert np.isnan(impl.permutation_ratios(d, all_same)[0])
        assert np.isnan(impl.permutation_ratios(d, all_diff)[0])
