"""Numpy layer primitives with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns input gradients
followed by parameter gradients. Arrays carry arbitrary leading batch
dimensions; the last axis is the feature axis.
"""

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float: keeps float32 inputs float32


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_forward(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(u)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_backward(dy, cache):
    x, th = cache
    du_dx = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du_dx)


def _sum_leading(a, ndim):
    """Sum ``a`` over all but its trailing ``ndim`` axes."""
    lead = a.ndim - ndim
    if lead <= 0:
        return a
    return a.sum(axis=tuple(range(lead)))


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(dy, cache):
    x, w, has_bias = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dx, dw, db


def layernorm_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd, gain)


def layernorm_backward(dy, cache):
    xhat, rstd, gain = cache
    dgain = _sum_leading(dy * xhat, 1)
    dbias = _sum_leading(dy, 1)
    dxhat = dy * gain
    n = xhat.shape[-1]
    dx = rstd / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def attention_forward(q, k, v, scale):
    """Scaled dot-product attention over the last two axes.

    ``q``: (..., Lq, d), ``k``/``v``: (..., Lk, d). Returns (..., Lq, d).
    """
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    p = softmax(logits)
    return p @ v, (q, k, v, p, scale)


def attention_backward(dout, cache):
    q, k, v, p, scale = cache
    dv = np.swapaxes(p, -1, -2) @ dout
    dp = dout @ np.swapaxes(v, -1, -2)
    dlogits = softmax_backward(dp, p) * scale
    dq = dlogits @ k
    dk = np.swapaxes(dlogits, -1, -2) @ q
    return dq, dk, dv


def split_heads(x, heads):
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    return np.swapaxes(x, -2, -3)


def merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def conv2d_forward(x, w, b):
    """Stride-1 'same' convolution with zero padding, channels last.

    ``x``: (B, H, W, Cin), ``w``: (k, k, Cin, Cout), ``b``: (Cout,).
    Computed as a sum of k*k shifted matmuls.
    """
    k = w.shape[0]
    pad = k // 2
    B, H, W, _ = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    y = np.zeros((B, H, W, w.shape[3]), dtype=np.result_type(x, w))
    y += b
    for i in range(k):
        for j in range(k):
            y += xp[:, i:i + H, j:j + W, :] @ w[i, j]
    return y, (xp, w)


def conv2d_backward(dy, cache):
    xp, w = cache
    k = w.shape[0]
    pad = k // 2
    B, H, W, cout = dy.shape
    cin = xp.shape[-1]
    dy2 = dy.reshape(-1, cout)
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dw[i, j] = xp[:, i:i + H, j:j + W, :].reshape(-1, cin).T @ dy2
            dxp[:, i:i + H, j:j + W, :] += dy @ w[i, j].T
    db = dy2.sum(axis=0)
    return dxp[:, pad:pad + H, pad:pad + W, :], dw, db
