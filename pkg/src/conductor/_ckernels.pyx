# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled single-pass versions of the fused primitive kernels.

Same signatures and semantics as ``conductor._kernels_py``; rows are the
flattened leading axes and every reduction runs over the last axis.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


cdef inline cnp.ndarray _rows(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 0:
        return x.reshape(1, 1)
    return x.reshape(-1, x.shape[x.ndim - 1])


def layernorm_fwd(x, double eps):
    shape = np.shape(x)
    cdef const double[:, ::1] xv = _rows(x)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    out = np.empty((n, m))
    rs = np.empty((n, 1))
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] rv = rs
    cdef double mu, var, d, r
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += xv[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                d = xv[i, j] - mu
                ov[i, j] = d
                var += d * d
            var /= m
            r = 1.0 / sqrt(var + eps)
            rv[i, 0] = r
            for j in range(m):
                ov[i, j] *= r
    return out.reshape(shape), rs.reshape(shape[:-1] + (1,))


def layernorm_bwd(g, y, rstd):
    shape = np.shape(y)
    cdef const double[:, ::1] gv = _rows(np.broadcast_to(g, shape))
    cdef const double[:, ::1] yv = _rows(y)
    cdef const double[:, ::1] rv = _rows(rstd)
    cdef Py_ssize_t n = yv.shape[0], m = yv.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] ov = out
    cdef double gm, gym, r
    with nogil:
        for i in range(n):
            gm = 0.0
            gym = 0.0
            for j in range(m):
                gm += gv[i, j]
                gym += gv[i, j] * yv[i, j]
            gm /= m
            gym /= m
            r = rv[i, 0]
            for j in range(m):
                ov[i, j] = r * (gv[i, j] - gm - yv[i, j] * gym)
    return out.reshape(shape)


def softmax_fwd(x):
    shape = np.shape(x)
    cdef const double[:, ::1] xv = _rows(x)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] ov = out
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = xv[i, 0]
            for j in range(1, m):
                if xv[i, j] > mx:
                    mx = xv[i, j]
            s = 0.0
            for j in range(m):
                e = exp(xv[i, j] - mx)
                ov[i, j] = e
                s += e
            for j in range(m):
                ov[i, j] /= s
    return out.reshape(shape)


def softmax_bwd(g, y):
    shape = np.shape(y)
    cdef const double[:, ::1] gv = _rows(np.broadcast_to(g, shape))
    cdef const double[:, ::1] yv = _rows(y)
    cdef Py_ssize_t n = yv.shape[0], m = yv.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] ov = out
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += gv[i, j] * yv[i, j]
            for j in range(m):
                ov[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out.reshape(shape)


def gelu_fwd(x):
    shape = np.shape(x)
    cdef const double[:, ::1] xv = _rows(x)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] ov = out
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(m):
                v = xv[i, j]
                ov[i, j] = 0.5 * v * (1.0 + erf(v * INV_SQRT2))
    return out.reshape(shape)


def gelu_bwd(g, x):
    shape = np.shape(x)
    cdef const double[:, ::1] gv = _rows(np.broadcast_to(g, shape))
    cdef const double[:, ::1] xv = _rows(x)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] ov = out
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(m):
                v = xv[i, j]
                ov[i, j] = gv[i, j] * (0.5 * (1.0 + erf(v * INV_SQRT2))
                                       + v * INV_SQRT2PI * exp(-0.5 * v * v))
    return out.reshape(shape)
