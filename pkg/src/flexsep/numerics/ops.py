"""Differentiable primitives on :class:`Tensor`.

Every function returns a new tensor; gradients are wired through closures
that return one array (or ``None``) per parent.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .tensor import ContractError, ShapeError, Tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "abs",
    "clip", "relu", "sigmoid", "tanh", "gelu", "sum", "mean", "reshape",
    "transpose", "swapaxes", "getitem", "concat", "stack", "pad", "matmul",
    "linear", "softmax", "layer_norm", "conv1d", "conv1d_transpose",
    "depthwise_conv1d", "max_pool1d", "scaled_dot_product_attention",
]


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- element-wise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = a.data ** p
    return Tensor._make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return Tensor._make(out, (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x) with the Gaussian CDF written via erf."""
    return Tensor._make(kernels.gelu_forward(a.data), (a,), lambda g: (kernels.gelu_backward(a.data, g),), "gelu")


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


# -- shape manipulation --------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = not _is_advanced(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(out, (a,), bw, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._make(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), bw, "stack")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} width pairs for a {a.ndim}-d tensor")
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return Tensor._make(out, (a,), lambda g: (g[sl],), "pad")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions incompatible, {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                m = a.data.reshape(-1, a.shape[-1])
                gb = m.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, bw, "linear")


# -- normalisation / attention -------------------------------------------------

def _rows(x: np.ndarray, axis: int) -> tuple[np.ndarray, tuple[int, ...], int]:
    ax = axis % x.ndim
    moved = np.moveaxis(x, ax, -1)
    return np.ascontiguousarray(moved).reshape(-1, x.shape[ax]), moved.shape, ax


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    rows, moved_shape, ax = _rows(a.data, axis)
    p2 = kernels.softmax_forward(rows)
    out = np.moveaxis(p2.reshape(moved_shape), -1, ax)

    def bw(g):
        g2, _, _ = _rows(g, ax)
        gx = kernels.softmax_backward(p2, g2)
        return (np.moveaxis(gx.reshape(moved_shape), -1, ax),)

    return Tensor._make(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (population variance), then scale/shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    f = x.shape[-1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} for feature size {f}")
    x2 = x.data.reshape(-1, f)
    y, xhat, rstd = kernels.layer_norm_forward(x2, gamma.data, beta.data, eps)

    def bw(g):
        gx, gg, gb = kernels.layer_norm_backward(g.reshape(-1, f), xhat, rstd, gamma.data)
        return gx.reshape(x.shape), gg, gb

    return Tensor._make(y.reshape(x.shape), (x, gamma, beta), bw, "layer_norm")


_BLOCK_MIN_KEYS = 512          # long sequences take the row-blocked path
_BLOCK_SCORES = 1 << 18        # score entries per block, about 1 MB in float32


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None,
                                 return_weights: bool = False):
    """softmax(q k^T * scale) v over the last two axes.

    q is [..., Lq, d], k and v are [..., Lk, d]. Short key sequences keep the
    attention weights for the backward pass. Long ones are processed in row
    blocks that stay cache resident and recompute the weights on the way
    back from the saved log-sum-exp.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    lk = k.shape[-2]
    if not return_weights and lk >= _BLOCK_MIN_KEYS and q.shape[:-2] == k.shape[:-2] == v.shape[:-2]:
        return _attention_blocked(q, k, v, scale)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    p = kernels.softmax_forward(scores.reshape(-1, lk)).reshape(scores.shape)
    del scores
    out = np.matmul(p, v.data)

    def bw(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g) if v.requires_grad else None
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = kernels.softmax_backward(p.reshape(-1, lk), gp.reshape(-1, lk)).reshape(p.shape)
        del gp
        gs *= scale
        gq = np.matmul(gs, k.data) if q.requires_grad else None
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data) if k.requires_grad else None
        return _unbroadcast(gq, q.shape) if gq is not None else None, \
            _unbroadcast(gk, k.shape) if gk is not None else None, \
            _unbroadcast(gv, v.shape) if gv is not None else None

    out_t = Tensor._make(out, (q, k, v), bw, "attention")
    if return_weights:
        return out_t, p
    return out_t


def _attention_blocked(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    lead = q.shape[:-2]
    lq, d = q.shape[-2:]
    lk = k.shape[-2]
    q3 = q.data.reshape((-1, lq, d))
    k3 = k.data.reshape((-1, lk, d))
    v3 = v.data.reshape((-1, lk, v.shape[-1]))
    rows = max(1, _BLOCK_SCORES // lk)
    out = np.empty((q3.shape[0], lq, v3.shape[-1]), dtype=np.result_type(q3, v3))
    lse = np.empty((q3.shape[0], lq), dtype=out.dtype)
    for n in range(q3.shape[0]):
        kt = np.ascontiguousarray(k3[n].T)
        for i in range(0, lq, rows):
            s = q3[n, i:i + rows] @ kt
            s *= scale
            m = s.max(axis=-1, keepdims=True)
            s -= m
            np.exp(s, out=s)
            tot = s.sum(axis=-1, keepdims=True)
            out[n, i:i + rows] = (s @ v3[n]) / tot
            lse[n, i:i + rows] = (m + np.log(tot))[:, 0]

    def bw(g):
        g3 = g.reshape(out.shape)
        gq = np.zeros_like(q3)
        gk = np.zeros_like(k3)
        gv = np.zeros_like(v3)
        for n in range(q3.shape[0]):
            kt = np.ascontiguousarray(k3[n].T)
            vt = np.ascontiguousarray(v3[n].T)
            for i in range(0, lq, rows):
                gb = g3[n, i:i + rows]
                p = q3[n, i:i + rows] @ kt
                p *= scale
                p -= lse[n, i:i + rows, None]
                np.exp(p, out=p)
                gv[n] += p.T @ gb
                gs = gb @ vt
                # sum_j p_ij (g_i . v_j) = g_i . out_i
                gs -= np.sum(gb * out[n, i:i + rows], axis=-1, keepdims=True)
                gs *= p
                gs *= scale
                gq[n, i:i + rows] = gs @ k3[n]
                gk[n] += gs.T @ q3[n, i:i + rows]
        return gq.reshape(q.shape), gk.reshape(k.shape), gv.reshape(v.shape)

    return Tensor._make(out.reshape(lead + out.shape[1:]), (q, k, v), bw, "attention")


# -- convolutions --------------------------------------------------------------

def _flatten_lead(x: np.ndarray, keep: int) -> tuple[np.ndarray, tuple[int, ...]]:
    lead = x.shape[:-keep]
    return x.reshape((-1,) + x.shape[-keep:]), lead


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | tuple[int, int] = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of x [..., Cin, T] with w [Cout, Cin, K].

    Output length is floor((T + pads - dilation*(K-1) - 1) / stride) + 1.
    """
    if stride < 1 or dilation < 1:
        raise ContractError("conv1d: stride and dilation must be >= 1")
    if x.ndim < 2:
        raise ShapeError(f"conv1d: input must be [..., Cin, T], got {x.shape}")
    cout, cin, k = w.shape
    if x.shape[-2] != cin:
        raise ShapeError(f"conv1d: input channels {x.shape[-2]} != weight channels {cin} (w {w.shape})")
    pl, pr = (padding, padding) if isinstance(padding, int) else padding
    t = x.shape[-1]
    span = dilation * (k - 1) + 1
    if t + pl + pr < span:
        raise ContractError(f"conv1d: input too short, T={t} with padding {pl}+{pr} < kernel span {span}")
    x3, lead = _flatten_lead(x.data, 2)
    xp = np.pad(x3, ((0, 0), (0, 0), (pl, pr))) if (pl or pr) else x3
    y = kernels.conv1d_forward(xp, w.data, stride, dilation)
    if bias is not None:
        y += bias.data[:, None]
    out_shape = lead + y.shape[1:]

    def bw(g):
        g3 = g.reshape((-1,) + g.shape[-2:])
        gx = gw = gb = None
        if x.requires_grad:
            gxp = kernels.conv1d_backward_input(g3, w.data, stride, dilation, xp.shape[-1])
            gx = gxp[:, :, pl : pl + t].reshape(x.shape)
        if w.requires_grad:
            gw = kernels.conv1d_backward_weight(g3, xp, k, stride, dilation)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._make(y.reshape(out_shape), parents, bw, "conv1d")


def conv1d_transpose(y: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d`: y [..., Cin, L], w [Cin, Cout, K] -> [..., Cout, (L-1)*stride + K]."""
    if stride < 1:
        raise ContractError("conv1d_transpose: stride must be >= 1")
    cin, cout, k = w.shape
    if y.ndim < 2 or y.shape[-2] != cin:
        raise ShapeError(f"conv1d_transpose: input {y.shape} does not match weight {w.shape}")
    length = y.shape[-1]
    if length < 1:
        raise ContractError("conv1d_transpose: empty input")
    y3, lead = _flatten_lead(y.data, 2)
    t_out = (length - 1) * stride + k
    out = kernels.conv1d_backward_input(y3, w.data, stride, 1, t_out)
    if bias is not None:
        out += bias.data[:, None]

    def bw(g):
        g3 = g.reshape((-1,) + g.shape[-2:])
        gy = kernels.conv1d_forward(g3, w.data, stride, 1).reshape(y.shape) if y.requires_grad else None
        gw = kernels.conv1d_backward_weight(y3, g3, k, stride, 1) if w.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return (gy, gw, gb) if bias is not None else (gy, gw)

    parents = (y, w, bias) if bias is not None else (y, w)
    return Tensor._make(out.reshape(lead + out.shape[1:]), parents, bw, "conv1d_transpose")


def depthwise_conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution of x [..., C, T] with w [C, Kd], Kd odd."""
    c, kd = w.shape
    if kd % 2 == 0:
        raise ContractError(f"depthwise_conv1d: kernel size must be odd for same padding, got {kd}")
    if x.shape[-2] != c:
        raise ShapeError(f"depthwise_conv1d: channels {x.shape[-2]} != kernel rows {c}")
    half = kd // 2
    x3, lead = _flatten_lead(x.data, 2)
    xp = np.pad(x3, ((0, 0), (0, 0), (half, half)))
    y = kernels.depthwise_forward(xp, w.data)
    if bias is not None:
        y += bias.data[:, None]
    t = x.shape[-1]

    def bw(g):
        g3 = np.ascontiguousarray(g.reshape((-1,) + g.shape[-2:]))
        gxp, gw = kernels.depthwise_backward(g3, xp, w.data)
        gx = gxp[:, :, half : half + t].reshape(x.shape)
        gb = g3.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return Tensor._make(y.reshape(x.shape), parents, bw, "depthwise_conv1d")


def max_pool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling over the last axis; tail remainder dropped."""
    t = x.shape[-1]
    if t < window:
        raise ContractError(f"max_pool1d: input too short, T={t} < window {window}")
    x2 = x.data.reshape(-1, t)
    y, idx = kernels.maxpool_forward(x2, window)
    out_shape = x.shape[:-1] + (y.shape[1],)

    def bw(g):
        return (kernels.maxpool_backward(g.reshape(-1, g.shape[-1]), idx, window, t).reshape(x.shape),)

    return Tensor._make(y.reshape(out_shape), (x,), bw, "max_pool1d")
