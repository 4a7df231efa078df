# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the inner loops in :mod:`splitjko._kernels_py`."""
import numpy as np

from libc.math cimport exp, log, INFINITY


def softmin_rows(double[:, ::1] h, double[:, ::1] cost, double eps):
    cdef Py_ssize_t nb = h.shape[0], nj = h.shape[1], ni = cost.shape[0]
    cdef Py_ssize_t b, i, j
    cdef double m, s, v
    out_arr = np.empty((nb, ni), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double inv = 1.0 / eps
    for b in range(nb):
        for i in range(ni):
            m = -INFINITY
            for j in range(nj):
                v = h[b, j] - cost[i, j]
                if v > m:
                    m = v
            if m == -INFINITY:
                out[b, i] = -INFINITY
                continue
            s = 0.0
            for j in range(nj):
                s += exp((h[b, j] - cost[i, j] - m) * inv)
            out[b, i] = m + eps * log(s)
    return out_arr


def quantile_l2(double[::1] s0a, double[::1] s1a, double[::1] x0a, double[::1] x1a,
                double[::1] s0b, double[::1] s1b, double[::1] x0b, double[::1] x1b):
    cdef Py_ssize_t na = s0a.shape[0], nb = s0b.shape[0]
    cdef Py_ssize_t ia = 0, ib = 0
    cdef double u, v, ta, tb, xa_u, xa_v, xb_u, xb_v, d0, d1, total = 0.0
    u = 0.0
    while ia < na and ib < nb:
        v = s1a[ia] if s1a[ia] < s1b[ib] else s1b[ib]
        if u < s0a[ia]:
            u = s0a[ia]
        if u < s0b[ib]:
            u = s0b[ib]
        if v > u:
            ta = (x1a[ia] - x0a[ia]) / (s1a[ia] - s0a[ia])
            tb = (x1b[ib] - x0b[ib]) / (s1b[ib] - s0b[ib])
            xa_u = x0a[ia] + ta * (u - s0a[ia])
            xa_v = x0a[ia] + ta * (v - s0a[ia])
            xb_u = x0b[ib] + tb * (u - s0b[ib])
            xb_v = x0b[ib] + tb * (v - s0b[ib])
            d0 = xa_u - xb_u
            d1 = xa_v - xb_v
            total += (v - u) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0
        if s1a[ia] <= v:
            ia += 1
        if s1b[ib] <= v:
            ib += 1
        u = v
    return total
