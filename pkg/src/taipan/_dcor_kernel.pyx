# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused distance-covariance kernel.

Computes the three V-statistics needed for distance correlation without
materialising the n x n distance matrices: memory is O(n), time O(n^2 (p+q)).
Distances are computed twice (row means first, centred products second).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline double _dist(const double[:, ::1] x, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0, diff
    for k in range(x.shape[1]):
        diff = x[i, k] - x[j, k]
        acc += diff * diff
    return sqrt(acc)


def dcov_terms(const double[:, ::1] x, const double[:, ::1] y):
    """Return (dcov2_xy, dvar2_x, dvar2_y) as biased V-statistics."""
    cdef Py_ssize_t n = x.shape[0]
    if y.shape[0] != n:
        raise ValueError("x and y must have the same number of rows")
    cdef double[::1] ma = np.zeros(n, dtype=np.float64)
    cdef double[::1] mb = np.zeros(n, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double a, b, ga = 0.0, gb = 0.0
    cdef double s_ab = 0.0, s_aa = 0.0, s_bb = 0.0
    cdef double nd = <double>n

    with nogil:
        # pass 1: row means of both distance matrices
        for i in range(n):
            for j in range(i + 1, n):
                a = _dist(x, i, j)
                b = _dist(y, i, j)
                ma[i] += a
                ma[j] += a
                mb[i] += b
                mb[j] += b
        for i in range(n):
            ma[i] /= nd
            mb[i] /= nd
            ga += ma[i]
            gb += mb[i]
        ga /= nd
        gb /= nd
        # pass 2: recompute distances and accumulate double-centred products
        for i in range(n):
            a = ga - 2.0 * ma[i]
            b = gb - 2.0 * mb[i]
            s_ab += a * b
            s_aa += a * a
            s_bb += b * b
            for j in range(i + 1, n):
                a = _dist(x, i, j) - ma[i] - ma[j] + ga
                b = _dist(y, i, j) - mb[i] - mb[j] + gb
                s_ab += 2.0 * a * b
                s_aa += 2.0 * a * a
                s_bb += 2.0 * b * b

    nd = nd * nd
    return s_ab / nd, s_aa / nd, s_bb / nd
