"""Differentiable forward/backward kernels on dense NCHW arrays.

Tensors are plain ``numpy.ndarray`` objects holding 32-bit reals.  Every op
keeps its input dtype (float32 in, float32 out), so gradient checks can run
the same code in float64.  Inner products are accumulated in float64 and
rounded once at the end, which makes results independent of blocking.

Convolution is cross-correlation (the kernel is not flipped).
"""
import numpy as np

from . import backend
from .errors import ShapeError

__all__ = [
    "conv2d_forward", "conv2d_backward", "conv_output_size",
    "relu_forward", "relu_backward",
    "maxpool2d_forward", "maxpool2d_backward",
    "gap_forward", "gap_backward",
    "dense_forward", "dense_backward",
    "softmax_xent",
]


def _real_dtype(*arrays):
    dt = np.result_type(*[a.dtype for a in arrays], np.float32)
    return np.float64 if dt == np.float64 else np.float32


def _check_rank(x, rank, name):
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}", dim="rank", expected=rank, actual=x.ndim)


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x, weights, bias, stride, pad):
    _check_rank(x, 4, "conv input")
    _check_rank(weights, 4, "conv weights")
    N, C, H, W = x.shape
    D, Cw, kh, kw = weights.shape
    if Cw != C:
        raise ShapeError("conv weights/input channel mismatch", dim="C", expected=C, actual=Cw)
    if kh != kw:
        raise ShapeError("only square kernels are supported", dim="k", expected=kh, actual=kw)
    if bias is not None and bias.shape != (D,):
        raise ShapeError("conv bias length must equal kernel count", dim="D",
                         expected=D, actual=bias.shape)
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be >= 1 and pad >= 0", dim="stride", expected=">=1", actual=stride)
    if kh > H + 2 * pad:
        raise ShapeError("kernel taller than padded input", dim="H", expected=f">={kh}", actual=H + 2 * pad)
    if kw > W + 2 * pad:
        raise ShapeError("kernel wider than padded input", dim="W", expected=f">={kw}", actual=W + 2 * pad)
    return N, C, H, W, D, kh


def conv2d_forward(x, weights, bias=None, stride=1, pad=0, return_cols=False):
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``weights[D,C,k,k]``.

    With ``return_cols`` the float64 patch matrix is returned too so the
    backward pass can reuse it.
    """
    N, C, H, W, D, k = _check_conv(x, weights, bias, stride, pad)
    dtype = _real_dtype(x, weights)
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    cols = backend.im2col(np.ascontiguousarray(x), k, stride, pad)
    out = cols @ weights.reshape(D, -1).astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    out = out.reshape(N, Ho, Wo, D).transpose(0, 3, 1, 2).astype(dtype)
    out = np.ascontiguousarray(out)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(grad_out, x, weights, stride=1, pad=0, cols=None, need_input_grad=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    N, C, H, W, D, k = _check_conv(x, weights, None, stride, pad)
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    if grad_out.shape != (N, D, Ho, Wo):
        raise ShapeError("grad_out does not match conv output", dim="grad_out",
                         expected=(N, D, Ho, Wo), actual=grad_out.shape)
    dtype = _real_dtype(x, weights, grad_out)
    if cols is None:
        cols = backend.im2col(np.ascontiguousarray(x), k, stride, pad)
    g = grad_out.astype(np.float64).transpose(0, 2, 3, 1).reshape(N * Ho * Wo, D)
    grad_w = (g.T @ cols).reshape(weights.shape).astype(dtype)
    grad_b = g.sum(axis=0).astype(dtype)
    grad_x = None
    if need_input_grad:
        gcols = np.ascontiguousarray(g @ weights.reshape(D, -1).astype(np.float64))
        grad_x = backend.col2im(gcols, N, C, H, W, k, stride, pad).astype(dtype)
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out, x):
    # subgradient at exactly 0 is 0
    if grad_out.shape != x.shape:
        raise ShapeError("relu grad shape mismatch", dim="shape", expected=x.shape, actual=grad_out.shape)
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool2d_forward(x, window, stride=None):
    """Max pooling; returns ``(out, argmax)`` where argmax holds flat H*W indices.

    Ties go to the lowest flat index.
    """
    _check_rank(x, 4, "maxpool input")
    stride = window if stride is None else stride
    H, W = x.shape[2:]
    if window > H or window > W:
        raise ShapeError("pool window larger than input", dim="H" if window > H else "W",
                         expected=f"<={min(H, W)}", actual=window)
    if window < 1 or stride < 1:
        raise ShapeError("pool window and stride must be >= 1", dim="window", expected=">=1", actual=window)
    return backend.maxpool_forward(np.ascontiguousarray(x), window, stride)


def maxpool2d_backward(grad_out, argmax, H, W):
    if grad_out.shape != argmax.shape:
        raise ShapeError("maxpool grad/argmax mismatch", dim="shape", expected=argmax.shape,
                         actual=grad_out.shape)
    return backend.maxpool_backward(np.ascontiguousarray(grad_out),
                                    np.ascontiguousarray(argmax, dtype=np.int64), H, W)


def gap_forward(x):
    _check_rank(x, 4, "gap input")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError("gap needs a non-empty spatial extent", dim="HW", expected=">=1", actual=0)
    return x.astype(np.float64).mean(axis=(2, 3)).astype(x.dtype)


def gap_backward(grad_out, H, W):
    N, C = grad_out.shape
    g = grad_out / (H * W)
    return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], (N, C, H, W)), dtype=grad_out.dtype)


def dense_forward(x, weights, bias=None):
    _check_rank(x, 2, "dense input")
    _check_rank(weights, 2, "dense weights")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError("dense inner dimension mismatch", dim="F", expected=weights.shape[1],
                         actual=x.shape[1])
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ShapeError("dense bias length mismatch", dim="O", expected=weights.shape[0],
                         actual=bias.shape)
    out = x.astype(np.float64) @ weights.astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(_real_dtype(x, weights))


def dense_backward(grad_out, x, weights, need_input_grad=True):
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError("dense grad_out mismatch", dim="grad_out",
                         expected=(x.shape[0], weights.shape[0]), actual=grad_out.shape)
    dtype = _real_dtype(x, weights, grad_out)
    g = grad_out.astype(np.float64)
    grad_w = (g.T @ x.astype(np.float64)).astype(dtype)
    grad_b = g.sum(axis=0).astype(dtype)
    grad_x = (g @ weights.astype(np.float64)).astype(dtype) if need_input_grad else None
    return grad_x, grad_w, grad_b


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    _check_rank(logits, 2, "logits")
    labels = np.asarray(labels)
    N, C = logits.shape
    if labels.shape != (N,):
        raise ShapeError("one label per logit row required", dim="N", expected=N, actual=labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise ShapeError(f"label {int(bad)} out of range [0, {C})", dim="label", expected=f"[0,{C})",
                         actual=int(bad))
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(logsum - z[rows, labels]))
    p = np.exp(z - logsum[:, None])
    p[rows, labels] -= 1.0
    return loss, (p / N).astype(_real_dtype(logits))
