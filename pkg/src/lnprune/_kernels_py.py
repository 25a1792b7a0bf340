"""NumPy versions of the compiled kernels in ``_kernels.pyx``.

Results match the compiled versions bit for bit: the same float64 staging
and the same accumulation order are used.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    N, C, H, W = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5), dtype=np.float64).reshape(
        N * Ho * Wo, C * k * k)


def col2im(cols, N, C, H, W, k, stride, pad):
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    c6 = cols.reshape(N, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((N, C, H + 2 * pad + stride, W + 2 * pad + stride), dtype=np.float64)
    for ky in range(k):
        ymax = ky + stride * Ho
        for kx in range(k):
            xmax = kx + stride * Wo
            out[:, :, ky:ymax:stride, kx:xmax:stride] += c6[:, :, ky, kx]
    return np.ascontiguousarray(out[:, :, pad:pad + H, pad:pad + W])


def maxpool_forward(x, window, stride):
    N, C, H, W = x.shape
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(N, C, Ho, Wo, window * window)
    local = np.argmax(flat, axis=-1)  # first occurrence == lowest flat index
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    wy, wx = np.divmod(local, window)
    oy = (np.arange(Ho) * stride)[:, None]
    ox = (np.arange(Wo) * stride)[None, :]
    arg = (oy + wy) * W + (ox + wx)
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(grad_out, argmax, H, W):
    N, C, Ho, Wo = grad_out.shape
    out = np.zeros((N * C, H * W), dtype=grad_out.dtype)
    rows = np.repeat(np.arange(N * C), Ho * Wo)
    np.add.at(out, (rows, argmax.reshape(-1)), grad_out.reshape(-1))
    return out.reshape(N, C, H, W)
