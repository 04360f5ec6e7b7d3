# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv patch kernels: single-pass gather/scatter loops.

Bit-identical to the numpy backend: col2im accumulates each output
slot in the same increasing (ki, kj) order.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


def im2col(cnp.ndarray[cnp.float64_t, ndim=4] x_padded, int k, int stride, int oh, int ow):
    cdef Py_ssize_t n = x_padded.shape[0]
    cdef Py_ssize_t c = x_padded.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=6] cols = np.empty((n, oh, ow, c, k, k), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cv = cols
    cdef double[:, :, :, ::1] xv = x_padded
    cdef Py_ssize_t nn, i, j, cc, ki, kj
    for nn in range(n):
        for i in range(oh):
            for j in range(ow):
                for cc in range(c):
                    for ki in range(k):
                        for kj in range(k):
                            cv[nn, i, j, cc, ki, kj] = xv[nn, cc, i * stride + ki, j * stride + kj]
    return cols.reshape(n * oh * ow, c * k * k)


def col2im(cnp.ndarray[cnp.float64_t, ndim=2] cols, Py_ssize_t n, Py_ssize_t c,
           int hp, int wp, int k, int stride, int oh, int ow):
    cdef cnp.ndarray[cnp.float64_t, ndim=6] cols6 = cols.reshape(n, oh, ow, c, k, k)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] cv = cols6
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t nn, i, j, cc, ki, kj
    for ki in range(k):
        for kj in range(k):
            for nn in range(n):
                for cc in range(c):
                    for i in range(oh):
                        for j in range(ow):
                            ov[nn, cc, i * stride + ki, j * stride + kj] += cv[nn, i, j, cc, ki, kj]
    return out
