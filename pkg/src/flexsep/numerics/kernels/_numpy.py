"""Pure-numpy reference kernels.

Same signatures as the numba kernels in ``_numba``; inputs are contiguous
float arrays, padding has already been applied by the caller.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def _windows(x, k, stride, dilation):
    span = (k - 1) * dilation + 1
    win = sliding_window_view(x, span, axis=-1)
    return win[..., ::stride, ::dilation]


def conv1d_forward(x, w, stride, dilation):
    # x [N, Cin, Tp], w [Cout, Cin, K] -> [N, Cout, L]
    win = _windows(x, w.shape[2], stride, dilation)  # [N, Cin, L, K]
    y = np.tensordot(win, w, axes=([1, 3], [1, 2]))  # [N, L, Cout]
    return np.ascontiguousarray(y.transpose(0, 2, 1))


def conv1d_backward_input(gy, w, stride, dilation, t_in):
    n, _, length = gy.shape
    cin, k = w.shape[1], w.shape[2]
    cols = np.tensordot(gy, w, axes=([1], [0]))  # [N, L, Cin, K]
    gx = np.zeros((n, cin, t_in), dtype=gy.dtype)
    last = (length - 1) * stride + 1
    for j in range(k):
        off = j * dilation
        gx[:, :, off : off + last : stride] += cols[:, :, :, j].transpose(0, 2, 1)
    return gx


def conv1d_backward_weight(gy, x, k, stride, dilation):
    win = _windows(x, k, stride, dilation)  # [N, Cin, L, K]
    return np.tensordot(gy, win, axes=([0, 2], [0, 2]))  # [Cout, Cin, K]


def depthwise_forward(xp, w):
    # xp [N, C, Tp] already padded, w [C, K] -> [N, C, Tp-K+1]
    k = w.shape[1]
    length = xp.shape[2] - k + 1
    y = np.zeros((xp.shape[0], xp.shape[1], length), dtype=xp.dtype)
    for j in range(k):
        y += w[:, j, None] * xp[:, :, j : j + length]
    return y


def depthwise_backward(gy, xp, w):
    k = w.shape[1]
    length = gy.shape[2]
    gx = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        gx[:, :, j : j + length] += w[:, j, None] * gy
        gw[:, j] = np.einsum("nct,nct->c", gy, xp[:, :, j : j + length])
    return gx, gw


def maxpool_forward(x, window):
    # x [R, T] -> ([R, T//window], argmax [R, T//window])
    lp = x.shape[1] // window
    blocks = x[:, : lp * window].reshape(x.shape[0], lp, window)
    idx = blocks.argmax(axis=2)
    y = np.take_along_axis(blocks, idx[..., None], axis=2)[..., 0]
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool_backward(gy, idx, window, t_in):
    r, lp = gy.shape
    gx = np.zeros((r, t_in), dtype=gy.dtype)
    blocks = gx[:, : lp * window].reshape(r, lp, window)
    np.put_along_axis(blocks, idx[..., None], gy[..., None], axis=2)
    return gx


def layer_norm_forward(x, gamma, beta, eps):
    # x [R, F]
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(gy, xhat, rstd, gamma):
    gbeta = gy.sum(axis=0)
    ggamma = np.einsum("rf,rf->f", gy, xhat)
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    return gx, ggamma, gbeta


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def softmax_forward(x):
    # rows of x [R, F]
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_backward(p, gp):
    return p * (gp - np.sum(gp * p, axis=1, keepdims=True))
