"""Forward and backward passes for the layer kinds of an ``ArchSpec``.

Activations are channels-last ``(N, H, W, C)`` or ``(N, C)``. Each forward
function returns ``(output, cache)``; the matching backward takes the
upstream gradient and the cache and returns the input gradient(s) plus a
dict of parameter gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-3


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def im2col(x, fh, fw, stride, pad):
    xp = _pad(x, pad)
    win = sliding_window_view(xp, (fh, fw), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, fh * fw * x.shape[3])
    return cols, (n, ho, wo)


def col2im(dcols, x_shape, fh, fw, stride, pad, out_hw):
    n, h, w, c = x_shape
    ho, wo = out_hw
    d = dcols.reshape(n, ho, wo, fh, fw, c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    for i in range(fh):
        for j in range(fw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    if pad:
        return dxp[:, pad:-pad, pad:-pad, :]
    return dxp


def conv_forward(x, kernel, bias, stride, pad):
    fh, fw, cin, cout = kernel.shape
    cols, (n, ho, wo) = im2col(x, fh, fw, stride, pad)
    out = cols @ kernel.reshape(-1, cout)
    if bias is not None:
        out += bias
    return out.reshape(n, ho, wo, cout), (x.shape, cols, kernel, stride, pad, bias is not None)


def conv_backward(g, cache):
    x_shape, cols, kernel, stride, pad, has_bias = cache
    fh, fw, cin, cout = kernel.shape
    n, ho, wo, _ = g.shape
    g2 = g.reshape(-1, cout)
    grads = {"kernel": (cols.T @ g2).reshape(kernel.shape)}
    if has_bias:
        grads["bias"] = g2.sum(axis=0)
    dcols = g2 @ kernel.reshape(-1, cout).T
    return col2im(dcols, x_shape, fh, fw, stride, pad, (ho, wo)), grads


def dense_forward(x, kernel, bias):
    out = x @ kernel
    if bias is not None:
        out = out + bias
    return out, (x, kernel, bias is not None)


def dense_backward(g, cache):
    x, kernel, has_bias = cache
    grads = {"kernel": x.T @ g}
    if has_bias:
        grads["bias"] = g.sum(axis=0)
    return g @ kernel.T, grads


def batchnorm_forward(x, p, train, decay):
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        p["moving_mean"][...] = decay * p["moving_mean"] + (1 - decay) * mean
        p["moving_var"][...] = decay * p["moving_var"] + (1 - decay) * var
        mean, var = mean.astype(x.dtype), var.astype(x.dtype)
    else:
        mean, var = p["moving_mean"], p["moving_var"]
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x - mean) * inv
    return xhat * p["gamma"] + p["beta"], (xhat, inv, p["gamma"], train)


def batchnorm_backward(g, cache):
    xhat, inv, gamma, train = cache
    axes = tuple(range(g.ndim - 1))
    grads = {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)}
    gx = g * gamma
    if not train:
        return gx * inv, grads
    m = g.size // g.shape[-1]
    dx = inv / m * (m * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
    return dx, grads


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(g, mask):
    return g * mask


def maxpool_forward(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    n, ho, wo, c = win.shape[:4]
    flat = win.reshape(n, ho, wo, c, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, k, stride)


def maxpool_backward(g, cache):
    x_shape, arg, k, stride = cache
    n, ho, wo, c = g.shape
    dx = np.zeros(x_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g * (arg == i * k + j)
    return dx


def gap_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def gap_backward(g, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(g[:, None, None, :] / (h * w), x_shape).astype(g.dtype)


def skip_padding_forward(block, skip, layer):
    s = layer.stride
    sub = skip[:, ::s, ::s]
    out = np.zeros(block.shape[:3] + (layer.channels,), dtype=block.dtype)
    out[..., list(layer.block_index)] += block
    out[..., list(layer.skip_index)] += sub
    return out, (skip.shape, layer)


def skip_padding_backward(g, cache):
    skip_shape, layer = cache
    s = layer.stride
    dskip = np.zeros(skip_shape, dtype=g.dtype)
    dskip[:, ::s, ::s] = g[..., list(layer.skip_index)]
    return g[..., list(layer.block_index)], dskip


def skip_projection_forward(block, skip, kernel, bias, stride):
    proj, cache = conv_forward(skip, kernel, bias, stride, 0)
    return block + proj, cache


def skip_projection_backward(g, cache):
    dskip, grads = conv_backward(g, cache)
    return g, dskip, grads


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits (reduced in f64)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)
