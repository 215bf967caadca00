# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Pure-Python equivalents live in _kernels_py.py."""

from libc.math cimport floor, fabs

import numpy as np


def warp_abs_diff(const double[:, :, ::1] prev, const double[:, :, ::1] nxt,
                  const double[:, :, ::1] flow):
    """Sum of |nxt - warp(prev)| over in-bounds pixels, and the number of terms.

    flow[:, y, x] = (dx, dy) is the displacement that carried content from
    (x - dx, y - dy) in prev to (x, y) in nxt.
    """
    cdef Py_ssize_t C = prev.shape[0], H = prev.shape[1], W = prev.shape[2]
    cdef Py_ssize_t y, x, c, x0, y0, x1, y1
    cdef double sx, sy, fx, fy, v, total = 0.0
    cdef long count = 0
    cdef double eps = 1e-9
    for y in range(H):
        for x in range(W):
            sx = x - flow[0, y, x]
            sy = y - flow[1, y, x]
            if sx < -eps or sy < -eps or sx > W - 1 + eps or sy > H - 1 + eps:
                continue
            if sx < 0:
                sx = 0
            if sy < 0:
                sy = 0
            if sx > W - 1:
                sx = W - 1
            if sy > H - 1:
                sy = H - 1
            x0 = <Py_ssize_t>floor(sx)
            y0 = <Py_ssize_t>floor(sy)
            fx = sx - x0
            fy = sy - y0
            x1 = x0 + 1 if x0 + 1 < W else x0
            y1 = y0 + 1 if y0 + 1 < H else y0
            for c in range(C):
                v = (prev[c, y0, x0] * (1 - fx) * (1 - fy)
                     + prev[c, y0, x1] * fx * (1 - fy)
                     + prev[c, y1, x0] * (1 - fx) * fy
                     + prev[c, y1, x1] * fx * fy)
                total += fabs(nxt[c, y, x] - v)
            count += C
    return total, count


def blend_rows(const float[:, ::1] a, const float[:, ::1] b, const double[::1] alpha,
               float[:, ::1] out):
    """out[j] = alpha[j] * a[j] + (1 - alpha[j]) * b[j], accumulated in double."""
    cdef Py_ssize_t P = a.shape[0], K = a.shape[1], j, k
    cdef double w, wc
    for j in range(P):
        w = alpha[j]
        wc = 1.0 - w
        for k in range(K):
            out[j, k] = <float>(w * <double>a[j, k] + wc * <double>b[j, k])
    return np.asarray(out)
