# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MaxSim kernels. Inputs are float32, accumulation is in double.

Each page row is loaded once and scored against every query row, so the
query block stays in cache while the page data streams through.
"""

import numpy as np
from libc.math cimport INFINITY


cdef inline double _dot(const float* a, const float* b, Py_ssize_t d) noexcept nogil:
    # four independent partial sums let the adds overlap
    cdef double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0
    cdef Py_ssize_t t = 0
    while t + 4 <= d:
        s0 += <double>a[t] * <double>b[t]
        s1 += <double>a[t + 1] * <double>b[t + 1]
        s2 += <double>a[t + 2] * <double>b[t + 2]
        s3 += <double>a[t + 3] * <double>b[t + 3]
        t += 4
    while t < d:
        s0 += <double>a[t] * <double>b[t]
        t += 1
    return (s0 + s1) + (s2 + s3)


cdef double _score_rows(const float* q, Py_ssize_t nq, const float* p, Py_ssize_t lo, Py_ssize_t hi,
                        Py_ssize_t d, double* best) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double s, total = 0.0
    for i in range(nq):
        best[i] = -INFINITY
    for j in range(lo, hi):
        for i in range(nq):
            s = _dot(q + i * d, p + j * d, d)
            if s > best[i]:
                best[i] = s
    for i in range(nq):
        total += best[i]
    return total


def maxsim(const float[:, ::1] q, const float[:, ::1] p):
    cdef Py_ssize_t nq = q.shape[0], d = q.shape[1]
    buf = np.empty(nq, dtype=np.float64)
    cdef double[::1] best = buf
    cdef double total
    with nogil:
        total = _score_rows(&q[0, 0], nq, &p[0, 0], 0, p.shape[0], d, &best[0])
    return total


def maxsim_packed(const float[:, ::1] q, const float[:, ::1] packed, const long long[::1] offsets):
    """Score q against every page stored contiguously in ``packed``.

    Page ``k`` occupies rows ``offsets[k]:offsets[k + 1]``.
    """
    cdef Py_ssize_t n_pages = offsets.shape[0] - 1
    out = np.zeros(max(n_pages, 0), dtype=np.float64)
    if n_pages <= 0:
        return out
    cdef double[::1] scores = out
    cdef Py_ssize_t nq = q.shape[0], d = q.shape[1], k
    buf = np.empty(nq, dtype=np.float64)
    cdef double[::1] best = buf
    cdef const float* base = &packed[0, 0]
    with nogil:
        for k in range(n_pages):
            scores[k] = _score_rows(&q[0, 0], nq, base, offsets[k], offsets[k + 1], d, &best[0])
    return out
