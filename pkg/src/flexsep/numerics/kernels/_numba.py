"""Numba-compiled kernels mirroring ``_numpy`` one-for-one."""
import math

import numpy as np
from numba import njit

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


@njit(cache=True)
def _im2col(xrow2d, k, stride, dilation, length):
    # rows ordered (c, j) to match w.reshape(cout, cin * k)
    cin = xrow2d.shape[0]
    out = np.empty((cin * k, length), dtype=xrow2d.dtype)
    for c in range(cin):
        for j in range(k):
            off = j * dilation
            r = c * k + j
            for t in range(length):
                out[r, t] = xrow2d[c, off + t * stride]
    return out


@njit(cache=True)
def conv1d_forward(x, w, stride, dilation):
    n, cin, tp = x.shape
    cout, _, k = w.shape
    length = (tp - dilation * (k - 1) - 1) // stride + 1
    y = np.empty((n, cout, length), dtype=x.dtype)
    w2 = np.ascontiguousarray(w).reshape(cout, cin * k)
    for b in range(n):
        y[b] = np.dot(w2, _im2col(x[b], k, stride, dilation, length))
    return y


@njit(cache=True)
def conv1d_backward_input(gy, w, stride, dilation, t_in):
    n, cout, length = gy.shape
    cin, k = w.shape[1], w.shape[2]
    gx = np.zeros((n, cin, t_in), dtype=gy.dtype)
    taps_t = np.empty((k, cin, cout), dtype=w.dtype)
    for j in range(k):
        taps_t[j] = w[:, :, j].T
    for b in range(n):
        g = np.ascontiguousarray(gy[b])
        for j in range(k):
            cols = np.dot(taps_t[j], g)
            off = j * dilation
            for c in range(cin):
                for t in range(length):
                    gx[b, c, off + t * stride] += cols[c, t]
    return gx


@njit(cache=True)
def conv1d_backward_weight(gy, x, k, stride, dilation):
    n, cout, length = gy.shape
    cin = x.shape[1]
    gw = np.zeros((cout, cin * k), dtype=gy.dtype)
    for b in range(n):
        g = np.ascontiguousarray(gy[b])
        gw += np.dot(g, _im2col(x[b], k, stride, dilation, length).T)
    return gw.reshape(cout, cin, k)


@njit(cache=True, fastmath=True)
def depthwise_forward(xp, w):
    n, ch, tp = xp.shape
    k = w.shape[1]
    length = tp - k + 1
    y = np.zeros((n, ch, length), dtype=xp.dtype)
    for b in range(n):
        for c in range(ch):
            for j in range(k):
                wv = w[c, j]
                for t in range(length):
                    y[b, c, t] += wv * xp[b, c, t + j]
    return y


@njit(cache=True, fastmath=True)
def depthwise_backward(gy, xp, w):
    n, ch, length = gy.shape
    k = w.shape[1]
    gx = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(n):
        for c in range(ch):
            for j in range(k):
                wv = w[c, j]
                acc = 0.0
                for t in range(length):
                    g = gy[b, c, t]
                    gx[b, c, t + j] += wv * g
                    acc += g * xp[b, c, t + j]
                gw[c, j] += acc
    return gx, gw


@njit(cache=True, fastmath=True)
def maxpool_forward(x, window):
    r, t_in = x.shape
    lp = t_in // window
    y = np.empty((r, lp), dtype=x.dtype)
    idx = np.empty((r, lp), dtype=np.int64)
    for i in range(r):
        for j in range(lp):
            base = j * window
            best = x[i, base]
            arg = 0
            for q in range(1, window):
                v = x[i, base + q]
                if v > best:
                    best = v
                    arg = q
            y[i, j] = best
            idx[i, j] = arg
    return y, idx


@njit(cache=True)
def maxpool_backward(gy, idx, window, t_in):
    r, lp = gy.shape
    gx = np.zeros((r, t_in), dtype=gy.dtype)
    for i in range(r):
        for j in range(lp):
            gx[i, j * window + idx[i, j]] = gy[i, j]
    return gx


@njit(cache=True, fastmath=True)
def layer_norm_forward(x, gamma, beta, eps):
    r, f = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(r, dtype=x.dtype)
    for i in range(r):
        mu = 0.0
        for j in range(f):
            mu += x[i, j]
        mu /= f
        var = 0.0
        for j in range(f):
            d = x[i, j] - mu
            var += d * d
        var /= f
        s = 1.0 / math.sqrt(var + eps)
        rstd[i] = s
        for j in range(f):
            h = (x[i, j] - mu) * s
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True, fastmath=True)
def layer_norm_backward(gy, xhat, rstd, gamma):
    r, f = gy.shape
    gx = np.empty_like(gy)
    ggamma = np.zeros(f, dtype=gy.dtype)
    gbeta = np.zeros(f, dtype=gy.dtype)
    for i in range(r):
        m1 = 0.0
        m2 = 0.0
        for j in range(f):
            g = gy[i, j]
            ggamma[j] += g * xhat[i, j]
            gbeta[j] += g
            gh = g * gamma[j]
            m1 += gh
            m2 += gh * xhat[i, j]
        m1 /= f
        m2 /= f
        for j in range(f):
            gx[i, j] = (gy[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return gx, ggamma, gbeta


@njit(cache=True, fastmath=True)
def _gelu_fwd_flat(x, y):
    for i in range(x.size):
        v = x[i]
        y[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))


@njit(cache=True, fastmath=True)
def _gelu_bwd_flat(x, gy, gx):
    for i in range(x.size):
        v = x[i]
        cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
        gx[i] = gy[i] * (cdf + v * pdf)


def gelu_forward(x):
    y = np.empty_like(x)
    _gelu_fwd_flat(x.reshape(-1), y.reshape(-1))
    return y


def gelu_backward(x, gy):
    gx = np.empty_like(x)
    _gelu_bwd_flat(x.reshape(-1), np.ascontiguousarray(gy).reshape(-1), gx.reshape(-1))
    return gx


@njit(cache=True, fastmath=True)
def _shift_rows(x, out):
    r, f = x.shape
    for i in range(r):
        m = x[i, 0]
        for j in range(1, f):
            m = max(m, x[i, j])
        for j in range(f):
            out[i, j] = x[i, j] - m


@njit(cache=True, fastmath=True)
def _normalize_rows(p):
    r, f = p.shape
    for i in range(r):
        s = 0.0
        for j in range(f):
            s += p[i, j]
        inv = 1.0 / s
        for j in range(f):
            p[i, j] *= inv


def softmax_forward(x):
    # numba has no vector exp without SVML, so the exp pass stays in numpy
    p = np.empty_like(x)
    _shift_rows(x, p)
    np.exp(p, out=p)
    _normalize_rows(p)
    return p


@njit(cache=True, fastmath=True)
def softmax_backward(p, gp):
    r, f = p.shape
    gx = np.empty_like(p)
    zero = np.zeros(1, dtype=p.dtype)[0]
    for i in range(r):
        dot = zero
        for j in range(f):
            dot += gp[i, j] * p[i, j]
        for j in range(f):
            gx[i, j] = p[i, j] * (gp[i, j] - dot)
    return gx
