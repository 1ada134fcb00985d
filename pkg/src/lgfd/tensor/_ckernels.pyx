# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch gather/scatter used by conv2d.

Layout of the column buffer is (B, C, k, k, OH, OW); accumulation order in
``col2im`` matches the numpy fallback so both backends agree bit for bit.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int k, int stride, int oh, int ow):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    out = np.empty((B, C, k, k, oh, ow), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t b, c, ki, kj, i, j, row
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        for i in range(oh):
                            row = ki + stride * i
                            for j in range(ow):
                                cols[b, c, ki, kj, i, j] = xp[b, c, row, kj + stride * j]
    return out


def col2im(const double[:, :, :, :, :, ::1] cols, int hp, int wp, int stride):
    cdef Py_ssize_t B = cols.shape[0], C = cols.shape[1], k = cols.shape[2]
    cdef Py_ssize_t oh = cols.shape[4], ow = cols.shape[5]
    out = np.zeros((B, C, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, c, ki, kj, i, j, row
    with nogil:
        for b in range(B):
            for c in range(C):
                for ki in range(k):
                    for kj in range(k):
                        for i in range(oh):
                            row = ki + stride * i
                            for j in range(ow):
                                dx[b, c, row, kj + stride * j] += cols[b, c, ki, kj, i, j]
    return out


def pad2d(const double[:, :, :, ::1] x, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = out
    cdef Py_ssize_t b, c, i, j
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        xp[b, c, i + pad, j + pad] = x[b, c, i, j]
    return out
