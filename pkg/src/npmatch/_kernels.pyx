# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same contract as ``npmatch._kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def softmax_rows(x):
    cdef double[:, ::1] a = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, s
    with nogil:
        for i in range(n):
            m = a[i, 0]
            for j in range(1, k):
                if a[i, j] > m:
                    m = a[i, j]
            s = 0.0
            for j in range(k):
                o[i, j] = exp(a[i, j] - m)
                s += o[i, j]
            for j in range(k):
                o[i, j] /= s
    return out


def log_softmax_rows(x):
    cdef double[:, ::1] a = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, s
    with nogil:
        for i in range(n):
            m = a[i, 0]
            for j in range(1, k):
                if a[i, j] > m:
                    m = a[i, j]
            s = 0.0
            for j in range(k):
                s += exp(a[i, j] - m)
            s = log(s)
            for j in range(k):
                o[i, j] = a[i, j] - m - s
    return out


def logistic(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] a = arr.reshape(-1)
    out = np.empty(arr.shape, dtype=np.float64)
    cdef double[::1] o = out.reshape(-1)
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double e
    with nogil:
        for i in range(n):
            if a[i] >= 0.0:
                o[i] = 1.0 / (1.0 + exp(-a[i]))
            else:
                e = exp(a[i])
                o[i] = e / (1.0 + e)
    return out


def relu(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] a = arr.reshape(-1)
    out = np.empty(arr.shape, dtype=np.float64)
    cdef double[::1] o = out.reshape(-1)
    cdef Py_ssize_t i, n = a.shape[0]
    with nogil:
        for i in range(n):
            o[i] = a[i] if a[i] > 0.0 else 0.0
    return out


def relu_grad(g, x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] a = arr.reshape(-1)
    cdef double[::1] gg = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    out = np.empty(arr.shape, dtype=np.float64)
    cdef double[::1] o = out.reshape(-1)
    cdef Py_ssize_t i, n = a.shape[0]
    with nogil:
        for i in range(n):
            o[i] = gg[i] if a[i] > 0.0 else 0.0
    return out


def row_entropy(p):
    cdef double[:, ::1] a = np.ascontiguousarray(p, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(k):
                if a[i, j] > 0.0:
                    s -= a[i, j] * log(a[i, j])
            o[i] = s
    return out


def im2col(x, int kh, int kw, int stride, int pad):
    cdef double[:, :, :, ::1] a = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], c = a.shape[1], h = a.shape[2], w = a.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, y, xx, ch, i, j, row, col, sy, sx
    with nogil:
        for b in range(n):
            for y in range(oh):
                for xx in range(ow):
                    row = (b * oh + y) * ow + xx
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            sy = y * stride + i - pad
                            for j in range(kw):
                                sx = xx * stride + j - pad
                                if 0 <= sy < h and 0 <= sx < w:
                                    o[row, col] = a[b, ch, sy, sx]
                                else:
                                    o[row, col] = 0.0
                                col += 1
    return out


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef double[:, ::1] a = np.ascontiguousarray(cols, dtype=np.float64).reshape(
        n * oh * ow, c * kh * kw)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, y, xx, ch, i, j, row, col, sy, sx
    with nogil:
        for b in range(n):
            for y in range(oh):
                for xx in range(ow):
                    row = (b * oh + y) * ow + xx
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            sy = y * stride + i - pad
                            for j in range(kw):
                                sx = xx * stride + j - pad
                                if 0 <= sy < h and 0 <= sx < w:
                                    o[b, ch, sy, sx] += a[row, col]
                                col += 1
    return out


def pair_relu(a, b):
    """out[t*N + i] = max(0, a[i] + b[t]) for a (N, M), b (T, M)."""
    cdef double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] Bm = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0], m = A.shape[1], T = Bm.shape[0], t, i, j, r
    out = np.empty((T * n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double v
    with nogil:
        for t in range(T):
            for i in range(n):
                r = t * n + i
                for j in range(m):
                    v = A[i, j] + Bm[t, j]
                    o[r, j] = v if v > 0.0 else 0.0
    return out


def pair_relu_grad(g, out, Py_ssize_t n):
    """Gradients of :func:`pair_relu` w.r.t. ``a`` (N, M) and ``b`` (T, M)."""
    cdef double[:, ::1] G = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[:, ::1] O = np.ascontiguousarray(out, dtype=np.float64)
    cdef Py_ssize_t m = G.shape[1], T = G.shape[0] // n, t, i, j, r
    ga = np.zeros((n, m), dtype=np.float64)
    gb = np.zeros((T, m), dtype=np.float64)
    cdef double[:, ::1] GA = ga
    cdef double[:, ::1] GB = gb
    cdef double v
    with nogil:
        for t in range(T):
            for i in range(n):
                r = t * n + i
                for j in range(m):
                    if O[r, j] > 0.0:
                        v = G[r, j]
                        GA[i, j] += v
                        GB[t, j] += v
    return ga, gb
