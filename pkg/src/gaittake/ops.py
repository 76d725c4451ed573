"""Differentiable kernels over :class:`~gaittake.tensor.Tensor`.

Backward rules that are worth monkeypatching in tests (fault injection for
the gradient battery) are module-level ``_*_grad`` functions looked up at
call time.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, as_tensor

Number = Union[int, float]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def pow(x, p) -> Tensor:
    """Elementwise ``x ** p``; a tensor exponent requires positive ``x``."""
    x = as_tensor(x)
    if isinstance(p, Tensor):
        out = x.data ** p.data

        def bw(g):
            gx = _unbroadcast(g * p.data * x.data ** (p.data - 1.0), x.shape) if x.requires_grad else None
            gp = _unbroadcast(g * out * np.log(x.data), p.shape) if p.requires_grad else None
            return gx, gp

        return Tensor._from_op(out, (x, p), bw, "pow")
    p = float(p)
    out = x.data ** p

    def bw(g):
        return (g * p * x.data ** (p - 1.0),)

    return Tensor._from_op(out, (x,), bw, "pow")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    """Square root whose gradient at exactly zero is taken as zero."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor._from_op(out, (x,), bw, "sqrt")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def bw(g):
        return (g * _sigmoid(x.data),)

    return Tensor._from_op(out, (x,), bw, "softplus")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN visible to the non-finite checks downstream
    return Tensor._from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    return Tensor._from_op(out, (x,), lambda g: (np.where(mask, g, slope * g),), "leaky_relu")


def clamp_min(x, lo: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > lo
    return Tensor._from_op(np.where(mask, x.data, lo), (x,), lambda g: (g * mask,), "clamp_min")


ACTIVATIONS = {"softplus": softplus, "leaky_relu": leaky_relu, "relu": relu}


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat: empty input list")
    ndim = xs[0].ndim
    ax = axis % ndim if ndim else 0
    for x in xs[1:]:
        if x.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {xs[0].shape} and {x.shape} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(int(lo), int(hi))
            parts.append(g[tuple(index)])
        return parts

    return Tensor._from_op(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    expanded = []
    for x in xs:
        ax = axis % (x.ndim + 1)
        expanded.append(reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]))
    return concat(expanded, axis=axis)


def slice_(x, axis: int, start: int, stop: int, step: int = 1) -> Tensor:
    """Contiguous (or strided) range ``[start, stop)`` along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice: range [{start}, {stop}) invalid for axis {axis} of extent {n}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop, step)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor._from_op(x.data[index], (x,), bw, "slice")


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce(x, axis=None, kind: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (an int, a tuple, or None for all)."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    if kind == "sum":
        out = x.data.sum(axis=axes, keepdims=True)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)

    elif kind == "mean":
        # shifted by the max so that constant inputs come back exactly (sum / count can be off by an ulp)
        ref = x.data.max(axis=axes, keepdims=True) if x.size else np.zeros(kept_shape)
        out = ref + (x.data - ref).sum(axis=axes, keepdims=True) / count

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)

    elif kind == "max":
        out = x.data.max(axis=axes, keepdims=True)

        def bw(g):
            # ties: the first maximal element in C order takes the gradient
            moved = np.moveaxis(x.data, axes, tuple(range(x.ndim - len(axes), x.ndim)))
            flat = moved.reshape(moved.shape[: x.ndim - len(axes)] + (-1,))
            pick = flat.argmax(axis=-1)
            onehot = np.zeros_like(flat)
            np.put_along_axis(onehot, pick[..., None], 1.0, axis=-1)
            onehot = onehot.reshape(moved.shape)
            onehot = np.moveaxis(onehot, tuple(range(x.ndim - len(axes), x.ndim)), axes)
            return (onehot * g.reshape(kept_shape),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(x.shape) if i not in axes))
    return Tensor._from_op(out, (x,), bw, f"reduce_{kind}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axes(axis, x.ndim)[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)
    return Tensor._from_op(out, (x,), lambda g: (_softmax_grad(out, g, ax),), "softmax")


def _softmax_grad(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules on the leading axes of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "matmul")


def linear(x, weight, bias: Optional[Tensor] = None) -> Tensor:
    """Row-wise affine map ``x @ weight + bias`` (weight is d_in x d_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# --------------------------------------------------------------------------
# convolution and pooling


def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"{name} needs 3 entries, got {v}")
    return v


def conv3d(x, kernel, bias: Optional[Tensor] = None, pad=0, stride=1) -> Tensor:
    """Direct 3-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is ``c_in x T x h x w`` or batched ``N x c_in x T x h x w``;
    ``kernel`` is ``c_out x c_in x k_t x k_h x k_w``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    pad, stride = _triple(pad, "pad"), _triple(stride, "stride")
    if any(p < 0 for p in pad) or any(s < 1 for s in stride):
        raise ValueError(f"conv3d: invalid pad {pad} or stride {stride}")
    batched = x.ndim == 5
    if x.ndim not in (4, 5) or kernel.ndim != 5:
        raise ValueError(f"conv3d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    xd = x.data if batched else x.data[None]
    n, c_in = xd.shape[:2]
    c_out, kc = kernel.shape[:2]
    ksize = kernel.shape[2:]
    if kc != c_in:
        raise ValueError(f"conv3d: input {x.shape} has {c_in} channels, kernel {kernel.shape} expects {kc}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"conv3d: bias {bias.shape} does not match kernel {kernel.shape}")
    out_ext = []
    for ext, k, p, s in zip(xd.shape[2:], ksize, pad, stride):
        span = ext + 2 * p - k
        if span < 0:
            raise ValueError(f"conv3d: kernel {kernel.shape} larger than padded input {x.shape} (pad {pad})")
        if span % s:
            raise ValueError(f"conv3d: non-integer output extent for input {x.shape}, kernel {kernel.shape}, stride {stride}")
        out_ext.append(span // s + 1)
    xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else xd
    windows = sliding_window_view(xp, ksize, axis=(2, 3, 4))[:, :, :: stride[0], :: stride[1], :: stride[2]]
    # (N, T', h', w', c_out) -> (N, c_out, T', h', w')
    out = np.tensordot(windows, kernel.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.moveaxis(out, -1, 1)
    if bias is not None:
        out = out + bias.data[None, :, None, None, None]
    if not batched:
        out = out[0]

    def bw(g):
        gd = g if batched else g[None]
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = _conv3d_kernel_grad(xp, gd, ksize, stride)
        if bias is not None and bias.requires_grad:
            gb = gd.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            gxp = _conv3d_input_grad(gd, kernel.data, xp.shape, stride)
            sl = tuple(slice(p, p + e) for p, e in zip(pad, xd.shape[2:]))
            gx = gxp[(slice(None), slice(None)) + sl]
            if not batched:
                gx = gx[0]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, bw, "conv3d")


def _conv3d_kernel_grad(xp, g, ksize, stride) -> np.ndarray:
    n, c_out = g.shape[:2]
    c_in = xp.shape[1]
    out_ext = g.shape[2:]
    gk = np.empty((c_out, c_in) + tuple(ksize))
    g2 = g.transpose(1, 0, 2, 3, 4).reshape(c_out, -1)
    for a in range(ksize[0]):
        for b in range(ksize[1]):
            for d in range(ksize[2]):
                xs = xp[
                    :,
                    :,
                    a : a + stride[0] * (out_ext[0] - 1) + 1 : stride[0],
                    b : b + stride[1] * (out_ext[1] - 1) + 1 : stride[1],
                    d : d + stride[2] * (out_ext[2] - 1) + 1 : stride[2],
                ]
                gk[:, :, a, b, d] = g2 @ xs.transpose(1, 0, 2, 3, 4).reshape(c_in, -1).T
    return gk


def _conv3d_input_grad(g, kernel, xp_shape, stride) -> np.ndarray:
    c_out, c_in = kernel.shape[:2]
    ksize = kernel.shape[2:]
    n = g.shape[0]
    out_ext = g.shape[2:]
    # one GEMM into channels-last columns, then scatter-add each kernel offset
    w2 = kernel.transpose(0, 2, 3, 4, 1).reshape(c_out, -1)
    gl = g.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
    cols = (gl @ w2).reshape((n,) + tuple(out_ext) + tuple(ksize) + (c_in,))
    gxp = np.zeros((n,) + tuple(xp_shape[2:]) + (c_in,))
    for a in range(ksize[0]):
        for b in range(ksize[1]):
            for d in range(ksize[2]):
                gxp[
                    :,
                    a : a + stride[0] * (out_ext[0] - 1) + 1 : stride[0],
                    b : b + stride[1] * (out_ext[1] - 1) + 1 : stride[1],
                    d : d + stride[2] * (out_ext[2] - 1) + 1 : stride[2],
                ] += cols[:, :, :, :, a, b, d]
    return gxp.transpose(0, 4, 1, 2, 3)


def max_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling over the last two axes (remainders dropped)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d: window {k} larger than map {x.shape}")
    lead = x.shape[:-2]
    crop = x.data[..., : ho * k, : wo * k]
    blocks = crop.reshape(lead + (ho, k, wo, k))
    blocks = np.moveaxis(blocks, -3, -2).reshape(lead + (ho, wo, k * k))
    pick = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, pick[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = np.zeros(blocks.shape)
        np.put_along_axis(onehot, pick[..., None], g[..., None], axis=-1)
        onehot = np.moveaxis(onehot.reshape(lead + (ho, wo, k, k)), -2, -3).reshape(lead + (ho * k, wo * k))
        full = np.zeros(x.shape)
        full[..., : ho * k, : wo * k] = onehot
        return (full,)

    return Tensor._from_op(out, (x,), bw, "max_pool2d")


def gem(x, p, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Generalized mean ``(mean(max(x, eps) ** p)) ** (1/p)`` along ``axis``.

    ``p`` may be a float or a one-element tensor (learnable exponent). The
    forward pass is scaled by the per-slice maximum so large ``p`` cannot
    overflow.
    """
    x = as_tensor(x)
    ax = _norm_axes(axis, x.ndim)[0]
    p_t = p if isinstance(p, Tensor) else None
    pv = float(p_t.data.reshape(-1)[0]) if p_t is not None else float(p)
    if pv < 1.0:
        raise ValueError(f"gem: exponent must be >= 1, got {pv}")
    active = x.data > eps
    xc = np.where(active, x.data, eps)
    top = xc.max(axis=ax, keepdims=True)
    r = xc / top
    rp = r**pv
    mean_rp = rp.mean(axis=ax, keepdims=True)
    out_k = top * mean_rp ** (1.0 / pv)
    n = x.shape[ax]

    def bw(g):
        gk = g.reshape(out_k.shape) if g.shape != out_k.shape else g
        gx = gp = None
        if x.requires_grad:
            gx = np.where(active, gk * (xc / out_k) ** (pv - 1.0) / n, 0.0)
        if p_t is not None and p_t.requires_grad:
            w = rp / rp.sum(axis=ax, keepdims=True)
            dlog = -np.log(mean_rp) / pv**2 + (w * np.log(r)).sum(axis=ax, keepdims=True) / pv
            gp = np.array((gk * out_k * dlog).sum()).reshape(p_t.shape)
        return (gx, gp) if p_t is not None else (gx,)

    out = np.squeeze(out_k, axis=ax)
    parents = (x, p_t) if p_t is not None else (x,)
    return Tensor._from_op(out, parents, bw, "gem")
