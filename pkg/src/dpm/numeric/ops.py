"""Differentiable primitives.

Each function computes its forward value with numpy and registers the
analytic vector-Jacobian product on the tape via :func:`make`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make

ARCCOS_EPS = 1e-7


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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = x2 * (_GELU_C * 0.044715)
    t += _GELU_C
    t *= x
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def back(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) * C (1 + 3 * 0.044715 x^2)
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        d *= x
        d *= 0.5
        d *= 1.0 - t * t
        d += 0.5
        d += 0.5 * t
        d *= g
        return (d,)

    return make(out, (a,), back, "gelu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return make(np.where(keep, a.data, 0).astype(a.data.dtype), (a,),
                lambda g: (g * keep,), "relu")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where the bound is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = out == a.data
    return make(out, (a,), lambda g: (g * inside,), "clamp")


def cos(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


def arccos(a, eps: float = ARCCOS_EPS) -> Tensor:
    """arccos of the input clamped to ``[-1 + eps, 1 - eps]``."""
    a = as_tensor(a)
    x = np.clip(a.data, -1.0 + eps, 1.0 - eps)
    inside = x == a.data

    def back(g):
        return (-g * inside / np.sqrt(1.0 - x * x),)

    return make(np.arccos(x), (a,), back, "arccos")


# ---------------------------------------------------------------- linear algebra

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data
    # (..., k) @ (k, n): one flat GEMM instead of a loop over leading axes
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (n,))
    else:
        out = ad @ bd

    def back(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(g @ _swap(bd), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(_swap(ad) @ g, bd.shape)
        return ga, gb

    return make(out, (a, b), back, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inv = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts), detail=f"axis={axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(out, ts, back, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def index(a, idx) -> Tensor:
    """Slice or gather; basic slices and integer-array indexing both supported."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("index", a.shape, detail=str(exc)) from None
    basic = _is_basic_index(idx)
    src_shape, dtype = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    if basic:
        out = out.copy() if isinstance(out, np.ndarray) else np.asarray(out)
    return make(np.asarray(out), (a,), back, "index")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return make(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    src = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, src).copy(),)

    return make(np.asarray(out, dtype=a.data.dtype), (a,), back, "mean")


def max(a, axis: int = -1) -> Tensor:
    """Max along one axis; the gradient goes to the first maximising entry."""
    a = as_tensor(a)
    axis = axis % a.ndim
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    src, dtype = a.shape, a.data.dtype

    def back(g):
        full = np.zeros(src, dtype=dtype)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make(out, (a,), back, "max")


# ---------------------------------------------------------------- normalisation

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    out = x - np.log(np.exp(x).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make(out, (a,), back, "log_softmax")


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data
    n = np.maximum(np.sqrt((x * x).sum(axis=axis, keepdims=True)), eps)
    out = x / n

    def back(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / n,)

    return make(out, (a,), back, "l2_normalize")


def _row_mean(x: np.ndarray, avg: np.ndarray) -> np.ndarray:
    # mean over the last axis as a GEMV, several times faster than ndarray.mean here
    return (x @ avg)[..., None]


def _col_sum(g: np.ndarray) -> np.ndarray:
    g2 = g.reshape(-1, g.shape[-1])
    return np.ones(g2.shape[0], dtype=g.dtype) @ g2


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    avg = np.full(c, 1.0 / c, dtype=xd.dtype)
    xc = xd - _row_mean(xd, avg)
    inv = 1.0 / np.sqrt(_row_mean(xc * xc, avg) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - _row_mean(gh, avg) - xhat * _row_mean(gh * xhat, avg))
        ggamma = _col_sum(g * xhat) if gamma.requires_grad else None
        gbeta = _col_sum(g) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------- spatial

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on NHWC input with a (kh, kw, cin, cout) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    bsz, hin, win, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    if kh > hp or kw > wp:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    win_view = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win_view.shape[1], win_view.shape[2]
    # (B, Ho, Wo, cin, kh, kw) -> (B, Ho, Wo, kh, kw, cin)
    cols = np.ascontiguousarray(win_view.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(bsz, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias")
        out = out + b.data
        parents.append(b)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
            gxp = np.zeros((bsz, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + hin, padding:padding + win, :] if padding else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)

    return make(out, parents, back, "conv2d")


def avg_pool2d(x, kernel: int | tuple[int, int], stride: int | tuple[int, int] | None = None) -> Tensor:
    """Average pooling on NHWC input without padding."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", x.shape)
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    if stride is None:
        sh, sw = kh, kw
    else:
        sh, sw = (stride, stride) if isinstance(stride, int) else stride
    bsz, h, w, c = x.shape
    if kh > h or kw > w:
        raise ShapeError("avg_pool2d", x.shape, detail=f"kernel {(kh, kw)} too large")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    xd = x.data
    out = np.zeros((bsz, ho, wo, c), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xd[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
    out /= kh * kw

    def back(g):
        gx = np.zeros_like(xd)
        gs = g / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += gs
        return (gx,)

    return make(out, (x,), back, "avg_pool2d")


# ---------------------------------------------------------------- compositions

def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` as a single tape node."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    k, n = w.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (n,):
            raise ShapeError("linear", w.shape, b.shape, detail="bias")
        out += b.data
        parents.append(b)
    out = out.reshape(x.shape[:-1] + (n,))
    wd, xs = w.data, x.shape

    def back(g):
        g2 = g.reshape(-1, n)
        grads = [(g2 @ wd.T).reshape(xs) if x.requires_grad else None,
                 x2.T @ g2 if w.requires_grad else None]
        if b is not None:
            grads.append(_col_sum(g2) if b.requires_grad else None)
        return tuple(grads)

    return make(out, parents, back, "linear")


def self_attention(qkv, heads: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention from packed (B, T, 3c) projections.

    Returns the (B, T, c) head-merged output and, for inspection only, the
    (B, N, T, T) attention weights.
    """
    qkv = as_tensor(qkv)
    if qkv.ndim != 3 or qkv.shape[-1] % (3 * heads):
        raise ShapeError("self_attention", qkv.shape, detail=f"last axis must split into 3 x {heads} heads")
    bsz, t, c3 = qkv.shape
    c = c3 // 3
    dh = c // heads
    scale = 1.0 / float(np.sqrt(dh))
    parts = qkv.data.reshape(bsz, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = (np.ascontiguousarray(parts[i]) for i in range(3))   # (B, N, T, dh)
    scores = q @ np.swapaxes(k, -1, -2)
    scores *= scale
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores, out=scores)
    p /= p.sum(axis=-1, keepdims=True)
    o = p @ v
    out = np.ascontiguousarray(o.transpose(0, 2, 1, 3)).reshape(bsz, t, c)

    def back(g):
        go = np.ascontiguousarray(g.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3))
        gv = np.swapaxes(p, -1, -2) @ go
        gp = go @ np.swapaxes(v, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        gqkv = np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4)   # (B, T, 3, N, dh)
        return (np.ascontiguousarray(gqkv).reshape(bsz, t, c3),)

    return make(out, (qkv,), back, "self_attention"), p


def attention(q, k, v, scale: float | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    Returns the attended values and the attention weights.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = mul(matmul(q, transpose(k, _last_two_swapped(k.ndim))), scale)
    weights = softmax(scores, axis=-1)
    return matmul(weights, v), weights


def _last_two_swapped(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    logp = log_softmax(logits, axis=-1)
    picked = index(logp, (np.arange(logits.shape[0]), labels))
    return neg(mean(picked))


PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "sigmoid", "gelu", "relu",
    "clamp", "cos", "arccos", "matmul", "transpose", "reshape", "concat", "index", "sum",
    "mean", "max", "softmax", "log_softmax", "l2_normalize", "layer_norm", "conv2d",
    "avg_pool2d", "attention", "linear", "self_attention", "cross_entropy",
)


def primitives() -> tuple[str, ...]:
    """Names of the differentiable operations this module provides."""
    return PRIMITIVES

