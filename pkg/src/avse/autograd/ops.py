"""Differentiable operators.

The set is deliberately closed: elementwise arithmetic, matmul, 2-D
convolution and its transpose, frequency max-pooling, nearest-neighbour
upsampling, sigmoid/relu, reductions, concatenation, slicing and envelope
segmentation. Broadcasting is limited to a scalar against a tensor; anything
else must be expanded explicitly with :func:`upsample` on a size-1 axis.

Non-smooth points use fixed subgradients: abs'(0) = 0, relu'(0) = 0,
sqrt'(0) = 0, pooling ties go to the lowest index, and max_with_const
sends the gradient to the tensor when it equals the constant.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError, ShapeError
from .tensor import Tensor, as_tensor, make_result


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _reduce_to(g, shape):
    """Gradient of a scalar operand broadcast against a tensor."""
    return np.array(g.sum()).reshape(shape) if g.shape != shape else g


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return make_result(
        a.values + b.values, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return make_result(
        a.values - b.values, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return make_result(
        a.values * b.values, (a, b),
        lambda g: (_reduce_to(g * b.values, a.shape), _reduce_to(g * a.values, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.values == 0):
        raise NumericError("div: denominator has zero entries")
    out = a.values / b.values
    return make_result(
        out, (a, b),
        lambda g: (_reduce_to(g / b.values, a.shape), _reduce_to(-g * out / b.values, b.shape)), "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.values, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_result(a.values ** 2, (a,), lambda g: (2 * a.values * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise NumericError("sqrt of negative entries")
    out = np.sqrt(a.values)

    def bw(g):
        d = np.zeros_like(out)
        pos = out > 0
        d[pos] = 0.5 / out[pos]
        return (g * d,)

    return make_result(out, (a,), bw, "sqrt")


def abs(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = as_tensor(a)
    return make_result(np.abs(a.values), (a,), lambda g: (g * np.sign(a.values),), "abs")


def max_with_const(a, c) -> Tensor:
    """Elementwise max(a, c) for a constant scalar or same-shaped array ``c``."""
    a = as_tensor(a)
    c = np.asarray(c.values if isinstance(c, Tensor) else c, dtype=np.float64)
    if c.shape not in ((), a.shape):
        raise ShapeError(f"max_with_const: constant shape {c.shape} vs {a.shape}")
    take = a.values >= c
    return make_result(np.where(take, a.values, c), (a,), lambda g: (g * take,), "max_with_const")


def min_with_const(a, c) -> Tensor:
    """min(a, c) as -max(-a, -c); ties keep the gradient on ``a``."""
    c = np.asarray(c.values if isinstance(c, Tensor) else c, dtype=np.float64)
    return neg(max_with_const(neg(a), -c))


# ------------------------------------------------------------------ activations


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.values > 0
    return make_result(a.values * pos, (a,), lambda g: (g * pos,), "relu")


# -------------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.values, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / n)


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.values ** 2, axis=axis, keepdims=keepdims))

    def bw(g):
        n = out
        if axis is not None and not keepdims:
            g, n = np.expand_dims(g, axis), np.expand_dims(n, axis)
        if np.any(n == 0):
            raise NumericError("l2_norm: gradient undefined for a zero vector")
        return (g * a.values / n,)

    return make_result(out, (a,), bw, "l2_norm")


# ------------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return make_result(
        a.values @ b.values, (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g), "matmul",
    )


def _conv_geometry(h, w, kh, kw, stride, padding):
    (sh, sw), (ph, pw) = stride, padding
    num_h, num_w = h + 2 * ph - kh, w + 2 * pw - kw
    if num_h < 0 or num_w < 0 or num_h % sh or num_w % sw:
        raise ShapeError(
            f"conv geometry: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, "
            f"padding {padding} gives a non-integral output size"
        )
    return num_h // sh + 1, num_w // sw + 1


def _windows(xp, kh, kw, stride, out_hw):
    """(C, H', W', kh, kw) strided view of a padded input."""
    (sh, sw), (oh, ow) = stride, out_hw
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return v[:, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]


def _correlate(x, k, stride, padding):
    """Raw cross-correlation: x (C,H,W), k (K,C,kh,kw) -> (K,H',W')."""
    kh, kw = k.shape[2:]
    oh, ow = _conv_geometry(x.shape[1], x.shape[2], kh, kw, stride, padding)
    (ph, pw) = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, stride, (oh, ow))
    return np.einsum("chwij,kcij->khw", win, k, optimize=True)


def _correlate_adjoint(y, k, stride, padding, in_hw):
    """Adjoint of :func:`_correlate` w.r.t. its input: y (K,H',W') -> (C,H,W)."""
    (sh, sw), (ph, pw) = stride, padding
    kh, kw = k.shape[2:]
    oh, ow = y.shape[1:]
    h, w = in_hw
    out = np.zeros((k.shape[1], h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + (oh - 1) * sh + 1 : sh, j : j + (ow - 1) * sw + 1 : sw] += np.einsum(
                "khw,kc->chw", y, k[:, :, i, j], optimize=True
            )
    return out[:, ph : ph + h, pw : pw + w]


def _kernel_grad(x, g, kshape, stride, padding):
    """d<g, correlate(x, k)>/dk for x (C,H,W) and g (K,H',W')."""
    kh, kw = kshape[2:]
    (ph, pw) = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = _windows(xp, kh, kw, stride, g.shape[1:])
    return np.einsum("khw,chwij->kcij", g, win, optimize=True)


def _check_conv_args(x, k, name):
    if x.ndim != 3 or k.ndim != 4:
        raise ShapeError(f"{name}: need input (C,H,W) and kernels (K,C,kh,kw), got {x.shape}, {k.shape}")


def conv2d(x, kernels, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of a (C,H,W) input with (K,C,kh,kw) kernels."""
    x, k = as_tensor(x), as_tensor(kernels)
    _check_conv_args(x, k, "conv2d")
    if k.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: kernels expect {k.shape[1]} channels, input has {x.shape[0]}")
    stride, padding = _pair(stride), _pair(padding)
    out = _correlate(x.values, k.values, stride, padding)
    parents = (x, k)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({k.shape[0]},)")
        out = out + bias.values[:, None, None]
        parents = (x, k, bias)

    def bw(g):
        gx = _correlate_adjoint(g, k.values, stride, padding, x.shape[1:]) if x.requires_grad else None
        gk = _kernel_grad(x.values, g, k.shape, stride, padding) if k.requires_grad else None
        return (gx, gk, g.sum(axis=(1, 2))) if bias is not None else (gx, gk)

    return make_result(out, parents, bw, "conv2d")


def conv_transpose2d(y, kernels, bias=None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv2d` for the same (K,C,kh,kw) kernels:
    maps (K,H',W') to (C,H,W) with H = (H'-1)*stride - 2*padding + kh."""
    y, k = as_tensor(y), as_tensor(kernels)
    _check_conv_args(y, k, "conv_transpose2d")
    if k.shape[0] != y.shape[0]:
        raise ShapeError(f"conv_transpose2d: kernels expect {k.shape[0]} channels, input has {y.shape[0]}")
    stride, padding = _pair(stride), _pair(padding)
    kh, kw = k.shape[2:]
    h = (y.shape[1] - 1) * stride[0] - 2 * padding[0] + kh
    w = (y.shape[2] - 1) * stride[1] - 2 * padding[1] + kw
    if h <= 0 or w <= 0:
        raise ShapeError(f"conv_transpose2d: geometry gives non-positive output {h}x{w}")
    out = _correlate_adjoint(y.values, k.values, stride, padding, (h, w))
    parents = (y, k)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (k.shape[1],):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape}, expected ({k.shape[1]},)")
        out = out + bias.values[:, None, None]
        parents = (y, k, bias)

    def bw(g):
        gy = _correlate(g, k.values, stride, padding) if y.requires_grad else None
        gk = _kernel_grad(g, y.values, k.shape, stride, padding) if k.requires_grad else None
        return (gy, gk, g.sum(axis=(1, 2))) if bias is not None else (gy, gk)

    return make_result(out, parents, bw, "conv_transpose2d")


# -------------------------------------------------------------------- resampling


def pool_freq(x, factor: int = 2) -> Tensor:
    """Max over non-overlapping windows along axis 1 of a (C,F,T) tensor."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"pool_freq: need (C,F,T), got {x.shape}")
    c, f, t = x.shape
    if f % factor:
        raise ShapeError(f"pool_freq: F={f} not divisible by {factor}")
    blocks = x.values.reshape(c, f // factor, factor, t)
    idx = np.argmax(blocks, axis=2)  # first maximum wins ties
    out = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[:, :, None, :], g[:, :, None, :], axis=2)
        return (gb.reshape(x.shape),)

    return make_result(out, (x,), bw, "pool_freq")


def upsample(x, factor: int, axis: int) -> Tensor:
    """Nearest-neighbour repetition along ``axis``; on a size-1 axis this is
    an explicit broadcast."""
    x = as_tensor(x)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    axis = axis % x.ndim
    out = np.repeat(x.values, factor, axis=axis)

    def bw(g):
        shp = list(x.shape)
        shp.insert(axis + 1, factor)
        return (g.reshape(shp).sum(axis=axis + 1),)

    return make_result(out, (x,), bw, "upsample")


def upsample_time(x, factor: int = 2) -> Tensor:
    return upsample(x, factor, axis=-1)


def upsample_freq(x, factor: int = 2) -> Tensor:
    return upsample(x, factor, axis=-2)


# ----------------------------------------------------------------- restructuring


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0]
    axis = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return make_result(
        np.concatenate([t.values for t in ts], axis=axis), ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat",
    )


def split(x, sizes, axis: int = 0):
    x = as_tensor(x)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    if bounds[-1] != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    parts = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        index[axis] = slice(int(a), int(b))
        parts.append(getitem(x, tuple(index)))
    return parts


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.values[index]

    def bw(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, index, g)
        return (gx,)

    return make_result(np.array(out), (x,), bw, "getitem")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_result(x.values.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def segment(x, N: int) -> Tensor:
    """Overlapping length-N windows along the last axis of an (I, M) tensor,
    returned as (M - N + 1, I, N)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"segment: need (I, M), got {x.shape}")
    I, M = x.shape
    if M < N:
        raise ShapeError(f"segment: need at least {N} frames, got {M}")
    S = M - N + 1
    out = sliding_window_view(x.values, N, axis=1).transpose(1, 0, 2).copy()

    def bw(g):
        gx = np.zeros_like(x.values)
        for n in range(N):
            gx[:, n : n + S] += g[:, :, n].T
        return (gx,)

    return make_result(out, (x,), bw, "segment")
