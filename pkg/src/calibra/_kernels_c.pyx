# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``.

Same signatures, same memory layout, same results.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


cdef inline void _ox_range(Py_ssize_t j, Py_ssize_t w, Py_ssize_t wo, int stride, int padding,
                           Py_ssize_t *lo, Py_ssize_t *hi) noexcept nogil:
    # ox in [lo, hi) keeps ix = ox*stride + j - padding inside [0, w)
    cdef Py_ssize_t a = padding - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    a = w - 1 + padding - j
    hi[0] = 0 if a < 0 else min(wo, a // stride + 1)
    if hi[0] < lo[0]:
        hi[0] = lo[0]


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols, int k, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - k) // stride + 1
    cdef Py_ssize_t ci, i, j, b, oy, ox, iy, lo, hi, x0
    cdef real *dst
    cdef const real *src
    with nogil:
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    _ox_range(j, w, wo, stride, padding, &lo, &hi)
                    dst = &cols[(ci * k + i) * k + j, 0]
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + i - padding
                            if iy < 0 or iy >= h:
                                for ox in range(wo):
                                    dst[ox] = 0
                            else:
                                src = &x[b, ci, iy, 0]
                                x0 = j - padding
                                for ox in range(lo):
                                    dst[ox] = 0
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox * stride + x0]
                                for ox in range(hi, wo):
                                    dst[ox] = 0
                            dst += wo


def _col2im(real[:, ::1] cols, real[:, :, :, ::1] out, int k, int stride, int padding):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ho = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * padding - k) // stride + 1
    cdef Py_ssize_t ci, i, j, b, oy, ox, iy, lo, hi, x0
    cdef const real *src
    cdef real *dst
    with nogil:
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    _ox_range(j, w, wo, stride, padding, &lo, &hi)
                    src = &cols[(ci * k + i) * k + j, 0]
                    x0 = j - padding
                    for b in range(n):
                        for oy in range(ho):
                            iy = oy * stride + i - padding
                            if iy >= 0 and iy < h:
                                dst = &out[b, ci, iy, 0]
                                for ox in range(lo, hi):
                                    dst[ox * stride + x0] += src[ox]
                            src += wo


def _maxpool_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] out,
                     cnp.int64_t[:, :, :, ::1] idx, int window):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t b, ci, oy, ox, dy, dx
    cdef cnp.int64_t best_i
    cdef real best, v
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = x[b, ci, oy * window, ox * window]
                        best_i = 0
                        for dy in range(window):
                            for dx in range(window):
                                v = x[b, ci, oy * window + dy, ox * window + dx]
                                if v > best:
                                    best = v
                                    best_i = dy * window + dx
                        out[b, ci, oy, ox] = best
                        idx[b, ci, oy, ox] = best_i


def _maxpool_backward(real[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] idx,
                      real[:, :, :, ::1] out, int window):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    cdef Py_ssize_t b, ci, oy, ox
    cdef cnp.int64_t k
    with nogil:
        for b in range(n):
            for ci in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        k = idx[b, ci, oy, ox]
                        out[b, ci, oy * window + k // window, ox * window + k % window] = grad[b, ci, oy, ox]


def im2col(x, int k, int stride, int padding):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = np.empty((c * k * k, n * ho * wo), dtype=x.dtype)
    _im2col(x, cols, k, stride, padding)
    return cols


def col2im(cols, shape, int k, int stride, int padding):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(shape, dtype=cols.dtype)
    _col2im(cols, out, k, stride, padding)
    return out


def maxpool_forward(x, int window):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // window, w // window), dtype=x.dtype)
    idx = np.empty((n, c, h // window, w // window), dtype=np.int64)
    _maxpool_forward(x, out, idx, window)
    return out, idx


def maxpool_backward(grad, idx, int window):
    grad = np.ascontiguousarray(grad)
    n, c, ho, wo = grad.shape
    out = np.zeros((n, c, ho * window, wo * window), dtype=grad.dtype)
    _maxpool_backward(grad, np.ascontiguousarray(idx, dtype=np.int64), out, window)
    return out
