"""Compiled inner loops: patch extraction, patch scatter-add and max pooling.

Every function here has a NumPy twin in ``_kernels_py`` that produces
bit-identical results; accumulation orders are kept the same on purpose.
"""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((N * Ho * Wo, C * k * k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t n, c, ky, kx, oy, ox, iy, ix, row, col
    with nogil:
        for n in range(N):
            for oy in range(Ho):
                for ox in range(Wo):
                    row = (n * Ho + oy) * Wo + ox
                    col = 0
                    for c in range(C):
                        for ky in range(k):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                col += k
                                continue
                            for kx in range(k):
                                ix = ox * stride + kx - pad
                                if 0 <= ix < W:
                                    o[row, col] = x[n, c, iy, ix]
                                col += 1
    return out


def col2im(const double[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W,
           int k, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t n, c, ky, kx, oy, ox, iy, ix, col
    # (ky, kx) outermost so each element sums its contributions in the same
    # order as the vectorised twin.
    with nogil:
        for ky in range(k):
            for kx in range(k):
                for n in range(N):
                    for c in range(C):
                        col = (c * k + ky) * k + kx
                        for oy in range(Ho):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            for ox in range(Wo):
                                ix = ox * stride + kx - pad
                                if 0 <= ix < W:
                                    o[n, c, iy, ix] += cols[(n * Ho + oy) * Wo + ox, col]
    return out


def maxpool_forward(const real[:, :, :, ::1] x, int window, int stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - window) // stride + 1
    cdef Py_ssize_t Wo = (W - window) // stride + 1
    out = np.empty((N, C, Ho, Wo), dtype=np.asarray(x).dtype)
    arg = np.empty((N, C, Ho, Wo), dtype=np.int64)
    cdef real[:, :, :, ::1] o = out
    cdef long long[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, c, oy, ox, wy, wx, iy, ix, best_i
    cdef real best, v
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        iy = oy * stride
                        ix = ox * stride
                        best = x[n, c, iy, ix]
                        best_i = iy * W + ix
                        for wy in range(window):
                            for wx in range(window):
                                v = x[n, c, iy + wy, ix + wx]
                                # strict '>' keeps the lowest flat index on ties
                                if v > best:
                                    best = v
                                    best_i = (iy + wy) * W + ix + wx
                        o[n, c, oy, ox] = best
                        a[n, c, oy, ox] = best_i
    return out, arg


def maxpool_backward(const real[:, :, :, ::1] grad_out, const long long[:, :, :, ::1] argmax,
                     Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t N = grad_out.shape[0], C = grad_out.shape[1]
    cdef Py_ssize_t Ho = grad_out.shape[2], Wo = grad_out.shape[3]
    out = np.zeros((N, C, H * W), dtype=np.asarray(grad_out).dtype)
    cdef real[:, :, ::1] o = out
    cdef Py_ssize_t n, c, oy, ox
    with nogil:
        for n in range(N):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        o[n, c, argmax[n, c, oy, ox]] += grad_out[n, c, oy, ox]
    return out.reshape(N, C, H, W)
