# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror searchlab._kernels_py exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def merge_pair(cnp.int64_t[::1] ids, cnp.int64_t a, cnp.int64_t b, cnp.int64_t new_id):
    cdef Py_ssize_t n = ids.shape[0]
    cdef Py_ssize_t i = 0, j = 0
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    while i < n:
        if i + 1 < n and ids[i] == a and ids[i + 1] == b:
            out[j] = new_id
            i += 2
        else:
            out[j] = ids[i]
            i += 1
        j += 1
    return out_arr[:j]


def rank_sum_counts(cnp.int64_t[::1] scores, Py_ssize_t m):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t total = 0, i, j, s, w
    for i in range(n):
        total += scores[i]
    dp_arr = np.zeros((m + 1, total + 1), dtype=np.float64)
    cdef double[:, ::1] dp = dp_arr
    dp[0, 0] = 1.0
    cdef Py_ssize_t reach = 0
    for i in range(n):
        w = scores[i]
        reach += w
        for j in range(min(i + 1, m), 0, -1):
            for s in range(reach, w - 1, -1):
                dp[j, s] += dp[j - 1, s - w]
    return dp_arr[m].copy()


def permutation_ratios(double[:, ::1] dist, cnp.int64_t[:, ::1] label_perms):
    cdef Py_ssize_t n_perm = label_perms.shape[0]
    cdef Py_ssize_t n = dist.shape[0]
    cdef Py_ssize_t p, i, j
    cdef double within, cross
    cdef long n_within, n_cross
    out_arr = np.empty(n_perm, dtype=np.float64)
    cdef double[::1] out = out_arr
    for p in range(n_perm):
        within = 0.0
        cross = 0.0
        n_within = 0
        n_cross = 0
        for i in range(n):
            for j in range(i + 1, n):
                if label_perms[p, i] == label_perms[p, j]:
                    within += dist[i, j]
                    n_within += 1
                else:
                    cross += dist[i, j]
                    n_cross += 1
        if n_within == 0 or n_cross == 0:
            out[p] = np.nan
        elif within == 0.0:
            out[p] = np.inf if cross > 0.0 else np.nan
        else:
            out[p] = (cross / n_cross) / (within / n_within)
    return out_arr
