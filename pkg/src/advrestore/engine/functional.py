"""Differentiable primitives. All image tensors are N x C x H x W."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_node

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None
    return a, b


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return make_node(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# --- activations ---------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly 0 is 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,),
                     lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF via erf."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_node(out.astype(x.dtype, copy=False), (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))  # overflow-free logistic
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for {x.ndim}-d tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


softmax_axis = softmax


# --- reductions and shape ops ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_node(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_node(x.data[index], (x,), bw, "slice")


def chunk(x: Tensor, n: int, axis: int = 1) -> list:
    size = x.shape[axis]
    if size % n:
        raise ShapeError(f"dimension {axis} of size {size} is not divisible into {n} chunks")
    step = size // n
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(n)]


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}: {e}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


# --- image ops -------------------------------------------------------------------

def _check_4d(x: Tensor, what: str):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects N x C x H x W input, got shape {x.shape}")


def _zero_pad(d: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return d
    n, c, h, w = d.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=d.dtype)
    out[:, :, p:p + h, p:p + w] = d
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups.

    ``groups == C`` with one filter per group is a depthwise convolution.
    """
    _check_4d(x, "conv2d")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups:
        raise ShapeError(f"input channels C={c} not divisible by groups={groups}")
    if cg * groups != c:
        raise ShapeError(f"weight in-channels dimension {cg} != C/groups = {c // groups}")
    if o % groups:
        raise ShapeError(f"out channels O={o} not divisible by groups={groups}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    s, p = stride, padding
    hp, wp = h + 2 * p, w + 2 * p
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    og = o // groups
    xd, wd = x.data, weight.data
    xp = _zero_pad(xd, p)
    depthwise = cg == 1 and og == 1
    pointwise = kh == 1 and kw == 1 and s == 1 and p == 0

    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=np.result_type(xd, wd))
        tmp = np.empty_like(out)
        for i in range(kh):
            for j in range(kw):
                np.multiply(wd[None, :, 0, i, j, None, None], xp[:, :, i:i + s * ho:s, j:j + s * wo:s], out=tmp)
                out += tmp
        cols = None
    else:
        if pointwise:
            cols = xd.reshape(n, groups, cg, h * w)
        else:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
            cols = (win.reshape(n, groups, cg, ho, wo, kh, kw)
                    .transpose(0, 1, 2, 5, 6, 3, 4)
                    .reshape(n, groups, cg * kh * kw, ho * wo))
        wmat = wd.reshape(groups, og, cg * kh * kw)
        out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if depthwise:
            if weight.requires_grad:
                gw = np.empty_like(wd)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = np.einsum(
                            "nchw,nchw->c", g, xp[:, :, i:i + s * ho:s, j:j + s * wo:s])
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                tmp = np.empty_like(g)
                for i in range(kh):
                    for j in range(kw):
                        np.multiply(wd[None, :, 0, i, j, None, None], g, out=tmp)
                        gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += tmp
                gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        else:
            g3 = g.reshape(n, groups, og, ho * wo)
            if weight.requires_grad:
                gw = np.matmul(g3, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                wmat_ = wd.reshape(groups, og, cg * kh * kw)
                gcols = np.matmul(np.swapaxes(wmat_, -1, -2), g3)
                if pointwise:
                    gx = gcols.reshape(n, c, h, w)
                else:
                    gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                    gxp = np.zeros_like(xp)
                    for i in range(kh):
                        for j in range(kw):
                            gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, i, j]
                    gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw, "conv2d")


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize across channels independently at every (n, h, w) location."""
    _check_4d(x, "layer_norm_channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gd
            gx = rstd * (gxhat - gxhat.mean(axis=1, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_node(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "gap")


def _shuffle_down(d: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = d.shape
    return (d.reshape(n, c, h // r, r, w // r, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c * r * r, h // r, w // r))


def _shuffle_up(d: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = d.shape
    co = c // (r * r)
    return (d.reshape(n, co, r, r, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, co, h * r, w * r))


def pixel_shuffle(x: Tensor, factor: int, direction: str) -> Tensor:
    """Space-to-depth (``down``) or its exact inverse depth-to-space (``up``)."""
    _check_4d(x, "pixel_shuffle")
    n, c, h, w = x.shape
    r = factor
    if direction == "down":
        if h % r or w % r:
            raise ShapeError(f"pixel_shuffle down needs H, W divisible by {r}, got {h}x{w}")
        return make_node(_shuffle_down(x.data, r), (x,), lambda g: (_shuffle_up(g, r),), "shuffle_down")
    if direction == "up":
        if c % (r * r):
            raise ShapeError(f"pixel_shuffle up needs C divisible by {r * r}, got C={c}")
        return make_node(_shuffle_up(x.data, r), (x,), lambda g: (_shuffle_down(g, r),), "shuffle_up")
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


def simple_gate(x: Tensor) -> Tensor:
    """Product of the first and second channel halves."""
    _check_4d(x, "simple_gate")
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got C={c}")
    half = c // 2
    a, b = x.data[:, :half], x.data[:, half:]

    def bw(g):
        return (np.concatenate([g * b, g * a], axis=1),)

    return make_node(a * b, (x,), bw, "simple_gate")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    small = norm <= eps

    def bw(g):
        proj = out * (g * out).sum(axis=axis, keepdims=True)
        return (np.where(small, g / denom, (g - proj) / denom),)

    return make_node(out, (x,), bw, "l2_normalize")


def mse_loss(pred: Tensor, target, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over all elements, optionally weighted.

    ``weights`` is a constant array broadcastable to ``pred`` (no gradient flows
    into it). Multiplying by unit weights is exact, so ``weights=1`` reproduces
    the unweighted loss and its gradient bit-for-bit.
    """
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    sq = diff * diff
    if weights is not None:
        weights = np.asarray(weights, dtype=pred.dtype)
        sq = sq * weights
    out = np.asarray(sq.sum() / n, dtype=pred.dtype)

    def bw(g):
        gp = g * (2.0 / n) * diff
        if weights is not None:
            gp = gp * weights
        return (gp if pred.requires_grad else None, -gp if target.requires_grad else None)

    return make_node(out, (pred, target), bw, "mse")
