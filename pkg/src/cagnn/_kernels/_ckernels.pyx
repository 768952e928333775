# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for CSR propagation, edge softmax and Kendall counting.

Every function here has a numpy twin in ``_pykernels`` with identical
signature and semantics; ``cagnn._kernels`` picks one at import.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp
from libc.stdlib cimport free, malloc

cnp.import_array()


def spmm(const cnp.int64_t[::1] offsets, const cnp.int64_t[::1] targets,
         const double[::1] values, const double[:, ::1] x):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t k = x.shape[1]
    cdef Py_ssize_t i, e, c, j
    cdef double v
    out = np.zeros((n, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    with nogil:
        for i in range(n):
            for e in range(offsets[i], offsets[i + 1]):
                j = targets[e]
                v = values[e]
                for c in range(k):
                    y[i, c] += v * x[j, c]
    return out


def spmm_t(const cnp.int64_t[::1] offsets, const cnp.int64_t[::1] targets,
           const double[::1] values, const double[:, ::1] g, Py_ssize_t n_out):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t k = g.shape[1]
    cdef Py_ssize_t i, e, c, j
    cdef double v
    out = np.zeros((n_out, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    with nogil:
        for i in range(n):
            for e in range(offsets[i], offsets[i + 1]):
                j = targets[e]
                v = values[e]
                for c in range(k):
                    y[j, c] += v * g[i, c]
    return out


def sddmm(const cnp.int64_t[::1] offsets, const cnp.int64_t[::1] targets,
          const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t i, e, c, j
    cdef double s
    out = np.empty(targets.shape[0], dtype=np.float64)
    cdef double[::1] r = out
    with nogil:
        for i in range(n):
            for e in range(offsets[i], offsets[i + 1]):
                j = targets[e]
                s = 0.0
                for c in range(k):
                    s += a[i, c] * b[j, c]
                r[e] = s
    return out


def segment_softmax(const cnp.int64_t[::1] offsets, const double[::1] scores):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t i, e, lo, hi
    cdef double m, z
    out = np.zeros(scores.shape[0], dtype=np.float64)
    cdef double[::1] p = out
    with nogil:
        for i in range(n):
            lo = offsets[i]
            hi = offsets[i + 1]
            if hi == lo:
                continue
            m = scores[lo]
            for e in range(lo + 1, hi):
                if scores[e] > m:
                    m = scores[e]
            z = 0.0
            for e in range(lo, hi):
                p[e] = exp(scores[e] - m)
                z += p[e]
            for e in range(lo, hi):
                p[e] /= z
    return out


def segment_softmax_backward(const cnp.int64_t[::1] offsets, const double[::1] probs,
                             const double[::1] grad):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t i, e
    cdef double dot
    out = np.zeros(probs.shape[0], dtype=np.float64)
    cdef double[::1] r = out
    with nogil:
        for i in range(n):
            dot = 0.0
            for e in range(offsets[i], offsets[i + 1]):
                dot += probs[e] * grad[e]
            for e in range(offsets[i], offsets[i + 1]):
                r[e] = probs[e] * (grad[e] - dot)
    return out


cdef inline int _sign(double v) noexcept nogil:
    return (v > 0) - (v < 0)


def kendall_counts(const double[::1] x, const double[::1] y):
    """Return (concordant, discordant, ties_x_only, ties_y_only, ties_both)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, j
    # tally[3 * (sx + 1) + (sy + 1)] avoids a branch per pair
    cdef long long tally[9]
    cdef double xi, yi
    for i in range(9):
        tally[i] = 0
    with nogil:
        for i in range(n):
            xi = x[i]
            yi = y[i]
            for j in range(i + 1, n):
                tally[3 * (_sign(xi - x[j]) + 1) + _sign(yi - y[j]) + 1] += 1
    return (tally[0] + tally[8], tally[2] + tally[6], tally[3] + tally[5],
            tally[1] + tally[7], tally[4])


cdef long long _score(int* sx, signed char* sy, int* perm, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, p = 0
    cdef long long s = 0
    cdef signed char* row
    for i in range(n):
        row = sy + perm[i] * n
        for j in range(i + 1, n):
            s += sx[p] * row[perm[j]]
            p += 1
    return s


def kendall_permutation_tail(const double[::1] x, const double[::1] y, long long s_obs):
    """Count permutations of ``y`` whose |S| reaches |s_obs| (Heap's algorithm).

    Returns (extreme_count, total_count).
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t npairs = n * (n - 1) // 2
    cdef int* sx = <int*>malloc(max(npairs, 1) * sizeof(int))
    cdef int* perm = <int*>malloc(max(n, 1) * sizeof(int))
    cdef int* c = <int*>malloc(max(n, 1) * sizeof(int))
    cdef signed char* sy = <signed char*>malloc(max(n * n, 1) * sizeof(signed char))
    cdef Py_ssize_t i, j, p = 0
    cdef long long extreme = 0, total = 0, s, thr = s_obs if s_obs >= 0 else -s_obs
    cdef int tmp
    if sx == NULL or perm == NULL or c == NULL or sy == NULL:
        free(sx); free(perm); free(c); free(sy)
        raise MemoryError()
    try:
        for i in range(n):
            for j in range(i + 1, n):
                sx[p] = _sign(x[i] - x[j])
                p += 1
        for i in range(n):
            for j in range(n):
                sy[i * n + j] = <signed char>_sign(y[i] - y[j])
        with nogil:
            for i in range(n):
                perm[i] = <int>i
                c[i] = 0
            s = _score(sx, sy, perm, n)
            total = 1
            if s >= thr or -s >= thr:
                extreme = 1
            i = 1
            while i < n:
                if c[i] < i:
                    if i % 2 == 0:
                        tmp = perm[0]; perm[0] = perm[i]; perm[i] = tmp
                    else:
                        tmp = perm[c[i]]; perm[c[i]] = perm[i]; perm[i] = tmp
                    s = _score(sx, sy, perm, n)
                    total += 1
                    if s >= thr or -s >= thr:
                        extreme += 1
                    c[i] += 1
                    i = 1
                else:
                    c[i] = 0
                    i += 1
    finally:
        free(sx); free(perm); free(c); free(sy)
    return extreme, total
