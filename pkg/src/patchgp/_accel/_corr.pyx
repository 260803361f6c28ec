# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled valid-mode sliding-window correlation and its filter adjoint."""

import numpy as np


def correlate_valid(double[:, :, ::1] images, double[:, :, ::1] filters):
    """Correlate (n,H,W) images with (M,h,w) filters -> (n,H-h+1,W-w+1,M)."""
    cdef Py_ssize_t n = images.shape[0], H = images.shape[1], W = images.shape[2]
    cdef Py_ssize_t M = filters.shape[0], h = filters.shape[1], w = filters.shape[2]
    cdef Py_ssize_t Hp = H - h + 1, Wp = W - w + 1
    out_arr = np.zeros((n, Hp, Wp, M), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, p, q, m, a, b
    cdef double acc
    with nogil:
        for i in range(n):
            for p in range(Hp):
                for q in range(Wp):
                    for m in range(M):
                        acc = 0.0
                        for a in range(h):
                            for b in range(w):
                                acc = acc + images[i, p + a, q + b] * filters[m, a, b]
                        out[i, p, q, m] = acc
    return out_arr


def correlate_valid_adjoint_filters(double[:, :, ::1] images,
                                    double[:, :, :, ::1] grad_out,
                                    Py_ssize_t h, Py_ssize_t w):
    """Adjoint of correlate_valid with respect to the filters: (M,h,w)."""
    cdef Py_ssize_t n = images.shape[0]
    cdef Py_ssize_t Hp = grad_out.shape[1], Wp = grad_out.shape[2], M = grad_out.shape[3]
    g_arr = np.zeros((M, h, w), dtype=np.float64)
    cdef double[:, :, ::1] g = g_arr
    cdef Py_ssize_t i, p, q, m, a, b
    cdef double go
    with nogil:
        for i in range(n):
            for p in range(Hp):
                for q in range(Wp):
                    for m in range(M):
                        go = grad_out[i, p, q, m]
                        for a in range(h):
                            for b in range(w):
                                g[m, a, b] = g[m, a, b] + images[i, p + a, q + b] * go
    return g_arr
