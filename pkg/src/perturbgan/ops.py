"""Closed op set over :class:`~perturbgan.tape.Tensor`.

Primitives carry a numpy forward and a backward rule expressed with other
primitives, which is what makes second-order differentiation work. The
composite layer ops (linear, conv2d, channel_combine, batch_norm, ...) are
built from primitives and inherit their rules.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tape import Op, Tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar", "square", "sqrt",
    "tanh", "relu", "leaky_relu", "step", "sum", "mean", "reshape", "transpose",
    "broadcast_to", "sum_to", "matmul", "spatial_map", "im2col", "col2im",
    "add_mask", "linear", "channel_combine", "conv2d", "upsample_nearest",
    "upsample_bilinear", "avg_pool", "global_avg_pool", "batch_norm",
    "global_norm", "softmax_cross_entropy", "softmax",
]


def _sum_to_shape(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _reduce_like(ctx, k, g: Tensor) -> Tensor:
    shape = ctx.input_shape(k)
    return g if g.shape == shape else sum_to(g, shape)


# -- elementwise -------------------------------------------------------------

_ADD = Op("add", lambda a, b: a + b,
          lambda ctx, g: (_reduce_like(ctx, 0, g), _reduce_like(ctx, 1, g)))
_SUB = Op("sub", lambda a, b: a - b,
          lambda ctx, g: (_reduce_like(ctx, 0, g), _reduce_like(ctx, 1, neg(g))))
_MUL = Op("mul", lambda a, b: a * b,
          lambda ctx, g: (_reduce_like(ctx, 0, mul(g, ctx.input(1))),
                          _reduce_like(ctx, 1, mul(g, ctx.input(0)))))
_DIV = Op("div", lambda a, b: a / b,
          lambda ctx, g: (_reduce_like(ctx, 0, div(g, ctx.input(1))),
                          _reduce_like(ctx, 1, neg(mul(g, div(ctx.output, ctx.input(1)))))))
_NEG = Op("neg", lambda a: -a, lambda ctx, g: (neg(g),))
_SCALE = Op("scale", lambda a, c: a * c, lambda ctx, g: (scale(g, ctx.attrs["c"]),))
_ADD_SCALAR = Op("add_scalar", lambda a, c: a + c, lambda ctx, g: (g,))
_SQUARE = Op("square", lambda a: a * a,
             lambda ctx, g: (mul(g, scale(ctx.input(0), 2.0)),))
_SQRT = Op("sqrt", np.sqrt, lambda ctx, g: (div(g, scale(ctx.output, 2.0)),))
_TANH = Op("tanh", np.tanh,
           lambda ctx, g: (mul(g, add_scalar(neg(square(ctx.output)), 1.0)),))
# derivative of step is zero almost everywhere
_STEP = Op("step", lambda a, low: ((a > 0) * (1.0 - low) + low).astype(a.dtype),
           lambda ctx, g: (None,))


def _relu_grad_fwd(g, a, low):
    # mask multiplies are several times faster than np.where here
    if low == 0.0:
        return g * (a > 0)
    return g * ((a > 0) * (1.0 - low) + low).astype(g.dtype)


def _leaky_fwd(a, alpha):
    if 0.0 <= alpha <= 1.0:
        return np.maximum(a, alpha * a)
    return np.where(a > 0, a, alpha * a)


# g * step(a): linear in g, piecewise constant in a
_RELU_GRAD = Op("relu_grad", _relu_grad_fwd,
                lambda ctx, gg: (relu_grad(gg, ctx.input(1), ctx.attrs["low"]), None))
_RELU = Op("relu", lambda a: np.maximum(a, 0),
           lambda ctx, g: (relu_grad(g, ctx.input(0)),))
_LEAKY = Op("leaky_relu", _leaky_fwd,
            lambda ctx, g: (relu_grad(g, ctx.input(0), ctx.attrs["alpha"]),))


def add(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply(_ADD, [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply(_SUB, [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply(_MUL, [a, b])


def div(a: Tensor, b: Tensor) -> Tensor:
    return a.tape.apply(_DIV, [a, b])


def neg(a: Tensor) -> Tensor:
    return a.tape.apply(_NEG, [a])


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape.apply(_SCALE, [a], c=float(c))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return a.tape.apply(_ADD_SCALAR, [a], c=float(c))


def square(a: Tensor) -> Tensor:
    return a.tape.apply(_SQUARE, [a])


def sqrt(a: Tensor) -> Tensor:
    return a.tape.apply(_SQRT, [a])


def tanh(a: Tensor) -> Tensor:
    return a.tape.apply(_TANH, [a])


def step(a: Tensor, low: float = 0.0) -> Tensor:
    """1 where a > 0, ``low`` elsewhere. ReLU's derivative at exactly 0 is 0."""
    return a.tape.apply(_STEP, [a], low=float(low))


def relu_grad(g: Tensor, a: Tensor, low: float = 0.0) -> Tensor:
    return g.tape.apply(_RELU_GRAD, [g, a], low=float(low))


def relu(a: Tensor) -> Tensor:
    return a.tape.apply(_RELU, [a])


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    return a.tape.apply(_LEAKY, [a], alpha=float(alpha))


# -- shape and reductions ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sum_fwd(a, axis, keepdims):
    return a.sum(axis=axis, keepdims=keepdims)


def _sum_vjp(ctx, g):
    shape = ctx.input_shape(0)
    axis = ctx.attrs["axis"]
    kept = tuple(1 if i in axis else s for i, s in enumerate(shape))
    if g.shape != kept:
        g = reshape(g, kept)
    return (broadcast_to(g, shape),)


_SUM = Op("sum", _sum_fwd, _sum_vjp)
_RESHAPE = Op("reshape", lambda a, shape: a.reshape(shape),
              lambda ctx, g: (reshape(g, ctx.input_shape(0)),))
_TRANSPOSE = Op("transpose", lambda a, axes: a.transpose(axes),
                lambda ctx, g: (transpose(g, tuple(np.argsort(ctx.attrs["axes"]))),))
_BROADCAST = Op("broadcast_to", lambda a, shape: np.broadcast_to(a, shape),
                lambda ctx, g: (sum_to(g, ctx.input_shape(0)),))
_SUM_TO = Op("sum_to", lambda a, shape: _sum_to_shape(a, shape),
             lambda ctx, g: (broadcast_to(g, ctx.input_shape(0)),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return a.tape.apply(_SUM, [a], axis=_norm_axes(axis, a.ndim), keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return a.tape.apply(_RESHAPE, [a], shape=tuple(shape))


def transpose(a: Tensor, axes) -> Tensor:
    return a.tape.apply(_TRANSPOSE, [a], axes=tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return a.tape.apply(_BROADCAST, [a], shape=tuple(shape))


def sum_to(a: Tensor, shape) -> Tensor:
    return a.tape.apply(_SUM_TO, [a], shape=tuple(shape))


# -- matmul ------------------------------------------------------------------

def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, axes)


def _matmul_vjp(ctx, g):
    a, b = ctx.input(0), ctx.input(1)
    return (_reduce_like(ctx, 0, matmul(g, _swap_last(b))),
            _reduce_like(ctx, 1, matmul(_swap_last(a), g)))


_MATMUL = Op("matmul", np.matmul, _matmul_vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (both operands at least 2-D)."""
    return a.tape.apply(_MATMUL, [a, b])


# -- spatial linear maps -----------------------------------------------------

def _spatial_fwd(a, mh, mw, kind):
    return np.matmul(np.matmul(mh, a), mw.T)


def _spatial_vjp(ctx, g):
    mh, mw = ctx.attrs["mh"], ctx.attrs["mw"]
    return (spatial_map(g, mh.T, mw.T, ctx.attrs["kind"] + "_adjoint"),)


_SPATIAL = Op("spatial_map", _spatial_fwd, _spatial_vjp)


def spatial_map(a: Tensor, mh: np.ndarray, mw: np.ndarray, kind: str = "spatial") -> Tensor:
    """out[..., i, j] = sum_{h,w} mh[i, h] * a[..., h, w] * mw[j, w]."""
    mh = np.asarray(mh, dtype=a.tape.dtype)
    mw = np.asarray(mw, dtype=a.tape.dtype)
    if mh.shape[1] != a.shape[-2] or mw.shape[1] != a.shape[-1]:
        raise ValueError(f"{kind}: map shapes {mh.shape}, {mw.shape} do not fit input {a.shape}")
    return a.tape.apply(_SPATIAL, [a], mh=mh, mw=mw, kind=kind)


@lru_cache(maxsize=None)
def nearest_matrix(n: int, factor: int = 2) -> np.ndarray:
    """Row i picks source index floor((i + 0.5) / factor)."""
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        m[i, int(np.floor((i + 0.5) / factor))] = 1.0
    m.flags.writeable = False
    return m


@lru_cache(maxsize=None)
def bilinear_matrix(n: int, factor: int = 2) -> np.ndarray:
    """Half-pixel-centre interpolation weights, source coordinate clamped to [0, n-1]."""
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.flags.writeable = False
    return m


@lru_cache(maxsize=None)
def pool_matrix(n: int, window: int = 2) -> np.ndarray:
    m = np.zeros((n // window, n))
    for i in range(n // window):
        m[i, i * window:(i + 1) * window] = 1.0 / window
    m.flags.writeable = False
    return m


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    h, w = a.shape[-2:]
    return spatial_map(a, nearest_matrix(h, factor), nearest_matrix(w, factor), "upsample_nearest")


def upsample_bilinear(a: Tensor, factor: int = 2) -> Tensor:
    h, w = a.shape[-2:]
    return spatial_map(a, bilinear_matrix(h, factor), bilinear_matrix(w, factor), "upsample_bilinear")


def avg_pool(a: Tensor, window: int = 2) -> Tensor:
    h, w = a.shape[-2:]
    if h % window or w % window:
        raise ValueError(f"avg_pool: extents {(h, w)} not divisible by {window}")
    return spatial_map(a, pool_matrix(h, window), pool_matrix(w, window), "avg_pool")


def global_avg_pool(a: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(a, axis=(2, 3))


# -- convolution via im2col ----------------------------------------------------

def _im2col_np(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # n, c, ho, wo, k, k
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _col2im_np(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += cols[:, :, di, dj]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


_IM2COL = Op("im2col", _im2col_np,
             lambda ctx, g: (col2im(g, ctx.input_shape(0), ctx.attrs["k"],
                                    ctx.attrs["stride"], ctx.attrs["pad"]),))
_COL2IM = Op("col2im", _col2im_np,
             lambda ctx, g: (im2col(g, ctx.attrs["k"], ctx.attrs["stride"], ctx.attrs["pad"]),))


def _out_extent(n, k, stride, pad):
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(f"conv: extent {n} with k={k}, stride={stride}, pad={pad} "
                         f"gives a non-integral output extent")
    return span // stride + 1


def im2col(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    _out_extent(x.shape[2], k, stride, pad)
    _out_extent(x.shape[3], k, stride, pad)
    return x.tape.apply(_IM2COL, [x], k=k, stride=stride, pad=pad)


def col2im(cols: Tensor, shape, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    return cols.tape.apply(_COL2IM, [cols], shape=tuple(shape), k=k, stride=stride, pad=pad)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, p, H, W) with a (q, p, k, k) kernel."""
    n, p, h, w = x.shape
    q, p2, k, _ = kernel.shape
    if p != p2:
        raise ValueError(f"conv2d: input has {p} channels, kernel expects {p2}")
    ho = _out_extent(h, k, stride, pad)
    wo = _out_extent(w, k, stride, pad)
    cols = im2col(x, k, stride, pad)
    y = matmul(reshape(kernel, (q, p * k * k)), cols)
    y = reshape(y, (n, q, ho, wo))
    if bias is not None:
        y = add(y, reshape(bias, (1, q, 1, 1)))
    return y


# -- layer composites --------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(N, in) @ (in, out) [+ bias]."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def channel_combine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 linear combination over channels: (N, I, H, W), (O, I) -> (N, O, H, W)."""
    n, i, h, w = x.shape
    o = weight.shape[0]
    if weight.shape[1] != i:
        raise ValueError(f"channel_combine: input has {i} channels, weights expect {weight.shape[1]}")
    y = reshape(matmul(weight, reshape(x, (n, i, h * w))), (n, o, h, w))
    if bias is not None:
        y = add(y, reshape(bias, (1, o, 1, 1)))
    return y


_ADD_MASK = Op("add_mask", lambda a, mask, key: a + mask, lambda ctx, g: (g,))


def add_mask(x: Tensor, mask: np.ndarray, key=None) -> Tensor:
    """Add a fixed noise mask; the mask is an attribute, so it never receives gradient."""
    mask = np.asarray(mask, dtype=x.tape.dtype)
    if np.broadcast_shapes(x.shape, mask.shape) != x.shape:
        raise ValueError(f"add_mask: mask {mask.shape} does not fit activation {x.shape}")
    return x.tape.apply(_ADD_MASK, [x], mask=mask, key=key)


def _bn_axes(ndim):
    return (0,) + tuple(range(2, ndim))


def _bn_cshape(shape):
    return tuple(s if i == 1 else 1 for i, s in enumerate(shape))


def _bn_fwd(x, gamma, beta, eps):
    axes = _bn_axes(x.ndim)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    cs = _bn_cshape(x.shape)
    return xc / np.sqrt(var + eps) * gamma.reshape(cs) + beta.reshape(cs)


def _bn_vjp(ctx, g):
    x, gamma = ctx.input_value(0), ctx.input_value(1)
    eps = ctx.attrs["eps"]
    axes = _bn_axes(x.ndim)
    cs = _bn_cshape(x.shape)
    gv = g.value
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv
    dbeta = gv.sum(axis=axes)
    dgamma = (gv * xhat).sum(axis=axes)
    dx = (gamma.reshape(cs) * inv) * (gv - gv.mean(axis=axes, keepdims=True)
                                      - xhat * (gv * xhat).mean(axis=axes, keepdims=True))
    t = ctx.tape
    return t.const(dx, copy=False), t.const(dgamma, copy=False), t.const(dbeta, copy=False)


# fused for speed; its backward is numpy, so it is first-order only
_BATCH_NORM = Op("batch_norm", _bn_fwd, _bn_vjp, second_order=False)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               running: tuple[np.ndarray, np.ndarray] | None = None):
    """Normalise over every axis but the channel axis (1).

    With ``running=(mean, var)`` the stored statistics are used as constants
    (generation mode). Otherwise batch statistics are used and also returned
    as numpy arrays for the caller's running-average update.
    """
    cshape = _bn_cshape(x.shape)
    if running is not None:
        rm, rv = running
        inv = 1.0 / np.sqrt(np.asarray(rv).reshape(cshape) + eps)
        xn = mul(sub(x, x.tape.const(np.asarray(rm).reshape(cshape))), x.tape.const(inv))
        return add(mul(xn, reshape(gamma, cshape)), reshape(beta, cshape)), None
    axes = _bn_axes(x.ndim)
    xv = x.value
    mu = xv.mean(axis=axes)
    var = xv.var(axis=axes)
    out = x.tape.apply(_BATCH_NORM, [x, gamma, beta], eps=float(eps))
    return out, (mu, var)


def global_norm(x: Tensor, per_sample: bool = True) -> Tensor:
    """L2 norm per sample (over all non-batch axes), or over everything for 1-D input."""
    if per_sample and x.ndim > 1:
        return sqrt(sum(square(x), axis=tuple(range(1, x.ndim))))
    return sqrt(sum(square(x)))


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _xent_fwd(logits, labels):
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.asarray(-logp[np.arange(len(labels)), labels].mean())


def _xent_vjp(ctx, g):
    logits = ctx.input_value(0)
    labels = ctx.attrs["labels"]
    p = _softmax_np(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return (mul(ctx.tape.const(p / len(labels)), g),)


_XENT = Op("softmax_cross_entropy", _xent_fwd, _xent_vjp, second_order=False)
_SOFTMAX = Op("softmax", _softmax_np, None, second_order=False)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits). First-order only."""
    return logits.tape.apply(_XENT, [logits], labels=np.asarray(labels, dtype=np.int64))


def softmax(logits: Tensor) -> Tensor:
    """Row softmax (not differentiable; used for inference only)."""
    return logits.tape.apply(_SOFTMAX, [logits])
