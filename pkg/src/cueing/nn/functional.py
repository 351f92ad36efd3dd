"""Differentiable primitives.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes the upstream gradient and the cache.  Functions are dtype-agnostic: the
model trains in float32 and gradient checks run the same code in float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


# -- convolution ---------------------------------------------------------------


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of x (N, C, H, W) with weight (O, C, k, k)."""
    N, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    Ho = conv_out_size(H, kh, stride, padding)
    Wo = conv_out_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    out = cols @ weight.reshape(O, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, weight, stride, padding, Ho, Wo, bias is not None)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache):
    x_shape, cols, weight, stride, padding, Ho, Wo, has_bias = cache
    N, C, H, W = x_shape
    O, _, kh, kw = weight.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0) if has_bias else None
    dcols = (d2 @ weight.reshape(O, -1)).reshape(N, Ho, Wo, C, kh, kw)
    dxp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
    return dx, dweight, dbias


# -- dense / elementwise ---------------------------------------------------------


def linear_forward(x, weight, bias):
    """y = x W^T + b for x (..., in), weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight, bias is not None)


def linear_backward(dout, cache):
    x, weight, has_bias = cache
    dx = dout @ weight
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dweight = d2.T @ x2
    dbias = d2.sum(axis=0) if has_bias else None
    return dx, dweight, dbias


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def sigmoid(x):
    # stable for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_forward(x):
    y = sigmoid(x)
    return y, y


def sigmoid_backward(dout, cache):
    y = cache
    return dout * y * (1 - y)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(x, axis=-1):
    y = softmax(x, axis)
    return y, (y, axis)


def softmax_backward(dout, cache):
    y, axis = cache
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


def layer_norm_forward(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=lead)
    dbias = dout.sum(axis=lead)
    dxhat = dout * gain
    dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dgain, dbias


def mean_forward(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim))
    axes = tuple(a % x.ndim for a in np.atleast_1d(axes))
    return x.mean(axis=axes), (x.shape, axes)


def mean_backward(dout, cache):
    shape, axes = cache
    count = int(np.prod([shape[a] for a in axes]))
    g = np.expand_dims(dout, axes) if axes else dout
    return np.broadcast_to(g / count, shape).copy()


# -- pooling -------------------------------------------------------------------


def adaptive_pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Averaging weights (n_out, n_in); bins as in adaptive average pooling."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def adaptive_avg_pool_forward(x, out_h, out_w):
    """(N, h, w) -> (N, out_h, out_w)."""
    ph = adaptive_pool_matrix(x.shape[-2], out_h, x.dtype)
    pw = adaptive_pool_matrix(x.shape[-1], out_w, x.dtype)
    return ph @ x @ pw.T, (ph, pw)


def adaptive_avg_pool_backward(dout, cache):
    ph, pw = cache
    return ph.T @ dout @ pw


# -- losses --------------------------------------------------------------------


def bce_loss(yhat, y):
    """Mean binary cross-entropy over the last axis (averaged over any batch)."""
    yhat = np.asarray(yhat)
    y = np.asarray(y)
    if yhat.shape != y.shape:
        raise ShapeError(f"bce_loss: prediction shape {yhat.shape} != target shape {y.shape}")
    return float(-np.mean(y * np.log(yhat) + (1 - y) * np.log1p(-yhat)))


def bce_backward(yhat, y):
    """dL/dyhat for :func:`bce_loss`."""
    return (yhat - y) / (yhat.size * yhat * (1 - yhat))


def bce_with_logits(z, y):
    """BCE of ``sigmoid(z)`` against ``y`` computed from logits."""
    if z.shape != y.shape:
        raise ShapeError(f"bce_with_logits: logit shape {z.shape} != target shape {y.shape}")
    loss = np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean())


def bce_with_logits_backward(z, y):
    return (sigmoid(z) - y) / z.size
