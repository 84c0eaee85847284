# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; the pure-numpy twins live in _pykernels."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint32_t, int64_t

cnp.import_array()

cdef extern from *:
    int __builtin_popcount(unsigned int) nogil


def scatter_convolve(const double[::1] a, const int64_t[::1] b_idx,
                     const double[::1] b_w, Py_ssize_t out_len):
    cdef Py_ssize_t na = a.shape[0], nb = b_idx.shape[0]
    cdef Py_ssize_t i, k, off
    cdef double w
    out_arr = np.zeros(out_len, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for k in range(nb):
            off = b_idx[k]
            w = b_w[k]
            for i in range(na):
                out[off + i] += a[i] * w
    return out_arr


def suffix_discount(const double[::1] m, double r):
    cdef Py_ssize_t n = m.shape[0], j
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double acc = 0.0
    with nogil:
        for j in range(n - 1, -1, -1):
            acc = m[j] + r * acc
            out[j] = acc
    return out_arr


def feinstein_batch(const uint32_t[:, ::1] codes, const uint32_t[:, ::1] y,
                    const int64_t[::1] level_start, const int64_t[::1] prefix_count,
                    const double[:, ::1] table, double gamma):
    cdef Py_ssize_t trials = codes.shape[0], N = y.shape[1]
    cdef Py_ssize_t total = prefix_count[N - 1]
    cdef Py_ssize_t t, j, n
    cdef double acc
    out_arr = np.full(trials, -1, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    with nogil:
        for t in range(trials):
            for j in range(total):
                acc = 0.0
                for n in range(N):
                    acc += table[n, __builtin_popcount(
                        codes[t, level_start[n] + j % prefix_count[n]] ^ y[t, n])]
                if acc > gamma:
                    out[t] = j
                    break
    return out_arr
