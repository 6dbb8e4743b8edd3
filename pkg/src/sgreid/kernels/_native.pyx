# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``sgreid.kernels.pure``.

Same contracts, same accumulation order (edge index order); see pure.py for
the semantics. These exist because the scatter/segment ops dominate the
message-passing inner loop and numpy's ``ufunc.at`` is slow.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def segment_softmax(double[::1] logits, long[::1] segments, Py_ssize_t n_segments):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t i
    cdef long s
    out_arr = np.empty(n, dtype=np.float64)
    max_arr = np.full(n_segments, -np.inf, dtype=np.float64)
    sum_arr = np.zeros(n_segments, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] seg_max = max_arr
    cdef double[::1] seg_sum = sum_arr
    for i in range(n):
        s = segments[i]
        if logits[i] > seg_max[s]:
            seg_max[s] = logits[i]
    for i in range(n):
        s = segments[i]
        out[i] = exp(logits[i] - seg_max[s])
        seg_sum[s] += out[i]
    for i in range(n):
        out[i] /= seg_sum[segments[i]]
    return out_arr


def segment_softmax_backward(
    double[::1] alpha, double[::1] grad_alpha, long[::1] segments, Py_ssize_t n_segments
):
    cdef Py_ssize_t n = alpha.shape[0]
    cdef Py_ssize_t i
    cdef long s
    out_arr = np.empty(n, dtype=np.float64)
    dot_arr = np.zeros(n_segments, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] seg_dot = dot_arr
    for i in range(n):
        seg_dot[segments[i]] += alpha[i] * grad_alpha[i]
    for i in range(n):
        s = segments[i]
        out[i] = alpha[i] * (grad_alpha[i] - seg_dot[s])
    return out_arr


def scatter_rowsum(double[:, ::1] rows, long[::1] index, Py_ssize_t n_out):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    cdef Py_ssize_t i, j
    cdef long r
    out_arr = np.zeros((n_out, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        r = index[i]
        for j in range(d):
            out[r, j] += rows[i, j]
    return out_arr


def scatter_weighted_rowsum(
    double[:, ::1] rows, double[::1] weights, long[::1] index, Py_ssize_t n_out
):
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t d = rows.shape[1]
    cdef Py_ssize_t i, j
    cdef long r
    cdef double w
    out_arr = np.zeros((n_out, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        r = index[i]
        w = weights[i]
        for j in range(d):
            out[r, j] += w * rows[i, j]
    return out_arr
