# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: ordered matrix products and sparse edge aggregation.

Every reduction runs in a fixed ascending order and each output element is
written by exactly one thread, so results are bitwise identical for any
thread count.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange


ctypedef fused real:
    float
    double


def matmul_nn(real[:, ::1] a, real[:, ::1] b, int num_threads):
    """c = a @ b with ascending-k accumulation per output element."""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    if real is float:
        out = np.zeros((m, n), dtype=np.float32)
    else:
        out = np.zeros((m, n), dtype=np.float64)
    cdef real[:, ::1] c = out
    cdef Py_ssize_t i, t, j
    cdef real a_it
    for i in prange(m, nogil=True, schedule="static", num_threads=num_threads):
        for t in range(k):
            a_it = a[i, t]
            if a_it != 0.0:
                for j in range(n):
                    c[i, j] += a_it * b[t, j]
    return out


def matmul_nt(real[:, ::1] a, real[:, ::1] b, int num_threads):
    """c = a @ b.T with ascending-k accumulation per output element."""
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    if real is float:
        out = np.zeros((m, n), dtype=np.float32)
    else:
        out = np.zeros((m, n), dtype=np.float64)
    cdef real[:, ::1] c = out
    cdef Py_ssize_t i, j, t
    cdef real acc
    for i in prange(m, nogil=True, schedule="static", num_threads=num_threads):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc = acc + a[i, t] * b[j, t]
            c[i, j] = acc
    return out


def matmul_tn(real[:, ::1] a, real[:, ::1] b, int num_threads):
    """c = a.T @ b with ascending-k accumulation per output element."""
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    if real is float:
        out = np.zeros((m, n), dtype=np.float32)
    else:
        out = np.zeros((m, n), dtype=np.float64)
    cdef real[:, ::1] c = out
    cdef Py_ssize_t i, t, j
    cdef real a_ti
    for i in prange(m, nogil=True, schedule="static", num_threads=num_threads):
        for t in range(k):
            a_ti = a[t, i]
            if a_ti != 0.0:
                for j in range(n):
                    c[i, j] += a_ti * b[t, j]
    return out


def edge_gather_sum(long long[::1] indptr, long long[::1] cols, real[::1] w,
                    real[:, ::1] z, int num_threads):
    """out[i] = sum over row i's edges of w[e] * z[cols[e]] (ascending e)."""
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1, n_ch = z.shape[1]
    if real is float:
        out = np.zeros((n_rows, n_ch), dtype=np.float32)
    else:
        out = np.zeros((n_rows, n_ch), dtype=np.float64)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t i, e, j, ch
    cdef real we
    for i in prange(n_rows, nogil=True, schedule="static", num_threads=num_threads):
        for e in range(indptr[i], indptr[i + 1]):
            j = cols[e]
            we = w[e]
            for ch in range(n_ch):
                o[i, ch] += we * z[j, ch]
    return out


def edge_scatter_sum(long long[::1] src, long long[::1] dst, real[::1] w,
                     real[:, ::1] g, Py_ssize_t n_rows):
    """out[dst[e]] += w[e] * g[src[e]], serial ascending e (deterministic)."""
    cdef Py_ssize_t n_edges = src.shape[0], n_ch = g.shape[1]
    if real is float:
        out = np.zeros((n_rows, n_ch), dtype=np.float32)
    else:
        out = np.zeros((n_rows, n_ch), dtype=np.float64)
    cdef real[:, ::1] o = out
    cdef Py_ssize_t e, ch, s, d
    cdef real we
    for e in range(n_edges):
        s = src[e]
        d = dst[e]
        we = w[e]
        for ch in range(n_ch):
            o[d, ch] += we * g[s, ch]
    return out


def edge_weight_grad(long long[::1] src, long long[::1] dst, real[:, ::1] g,
                     real[:, ::1] z, int num_threads):
    """dw[e] = <g[src[e]], z[dst[e]]> with ascending-channel accumulation."""
    cdef Py_ssize_t n_edges = src.shape[0], n_ch = g.shape[1]
    if real is float:
        out = np.zeros(n_edges, dtype=np.float32)
    else:
        out = np.zeros(n_edges, dtype=np.float64)
    cdef real[::1] o = out
    cdef Py_ssize_t e, ch, s, d
    cdef real acc
    for e in prange(n_edges, nogil=True, schedule="static", num_threads=num_threads):
        s = src[e]
        d = dst[e]
        acc = 0.0
        for ch in range(n_ch):
            acc = acc + g[s, ch] * z[d, ch]
        o[e] = acc
    return out
