"""Differentiable primitives.

Binary elementwise ops follow numpy broadcasting; gradients are summed back
to each operand's shape. conv3d and maxpool3d run on the kernels in
:mod:`voxbayes._kernels`.
"""

from __future__ import annotations

import builtins

import numpy as np

from .. import _kernels
from ..errors import NumericalError, ShapeError
from .core import Node, Primitive, apply

SOFTPLUS_LINEAR_ABOVE = 30.0


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


class _Add(Primitive):
    name = "add"

    def forward(self, values, attrs):
        a, b = values
        _broadcast_shape(self.name, a, b)
        return a + b, None

    def backward(self, g, values, value, ctx, attrs, needs):
        a, b = values
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(g, b.shape) if needs[1] else None)


class _Sub(Primitive):
    name = "sub"

    def forward(self, values, attrs):
        a, b = values
        _broadcast_shape(self.name, a, b)
        return a - b, None

    def backward(self, g, values, value, ctx, attrs, needs):
        a, b = values
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(-g, b.shape) if needs[1] else None)


class _Mul(Primitive):
    name = "mul"

    def forward(self, values, attrs):
        a, b = values
        _broadcast_shape(self.name, a, b)
        return a * b, None

    def backward(self, g, values, value, ctx, attrs, needs):
        a, b = values
        return (unbroadcast(g * b, a.shape) if needs[0] else None,
                unbroadcast(g * a, b.shape) if needs[1] else None)


class _Div(Primitive):
    name = "div"
    check_finite = True

    def forward(self, values, attrs):
        a, b = values
        _broadcast_shape(self.name, a, b)
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b, None

    def backward(self, g, values, value, ctx, attrs, needs):
        a, b = values
        return (unbroadcast(g / b, a.shape) if needs[0] else None,
                unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None)


class _Neg(Primitive):
    name = "neg"

    def forward(self, values, attrs):
        return -values[0], None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (-g,)


class _Exp(Primitive):
    name = "exp"
    check_finite = True

    def forward(self, values, attrs):
        with np.errstate(over="ignore"):
            return np.exp(values[0]), None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (g * value,)


class _Log(Primitive):
    name = "log"

    def forward(self, values, attrs):
        x = values[0]
        if np.any(x <= 0):
            raise NumericalError("log: input has non-positive entries")
        return np.log(x), None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (g / values[0],)


class _Sigmoid(Primitive):
    name = "sigmoid"

    def forward(self, values, attrs):
        x = values[0]
        # split by sign so neither branch overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (g * value * (1.0 - value),)


class _Tanh(Primitive):
    name = "tanh"

    def forward(self, values, attrs):
        return np.tanh(values[0]), None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (g * (1.0 - value * value),)


class _Relu(Primitive):
    name = "relu"

    def forward(self, values, attrs):
        return np.maximum(values[0], 0.0), None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (g * (values[0] > 0),)


class _Softplus(Primitive):
    name = "softplus"

    def forward(self, values, attrs):
        x = values[0]
        big = x > SOFTPLUS_LINEAR_ABOVE
        out = np.where(big, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_ABOVE))))
        return out, None

    def backward(self, g, values, value, ctx, attrs, needs):
        x = values[0]
        return (g * _Sigmoid().forward([x], {})[0],)


class _Square(Primitive):
    name = "square"

    def forward(self, values, attrs):
        return values[0] * values[0], None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (2.0 * g * values[0],)


class _Sqrt(Primitive):
    name = "sqrt"

    def forward(self, values, attrs):
        x = values[0]
        if np.any(x < 0):
            raise NumericalError("sqrt: input has negative entries")
        return np.sqrt(x), None

    def backward(self, g, values, value, ctx, attrs, needs):
        with np.errstate(divide="ignore"):
            out = g / (2.0 * value)
        if not np.all(np.isfinite(out)):
            raise NumericalError("sqrt: gradient at zero")
        return (out,)


class _Clip(Primitive):
    name = "clip"

    def forward(self, values, attrs):
        return np.clip(values[0], attrs["lo"], attrs["hi"]), None

    def backward(self, g, values, value, ctx, attrs, needs):
        x = values[0]
        return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axis, keepdims):
    if not keepdims:
        for a in sorted(axis):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


class _Sum(Primitive):
    name = "sum"

    def forward(self, values, attrs):
        x = values[0]
        axis = _norm_axis(attrs.get("axis"), x.ndim)
        return np.sum(x, axis=axis, keepdims=attrs.get("keepdims", False)), axis

    def backward(self, g, values, value, ctx, attrs, needs):
        x = values[0]
        return (np.array(_expand_reduced(g, x.shape, ctx, attrs.get("keepdims", False))),)


class _Mean(Primitive):
    name = "mean"

    def forward(self, values, attrs):
        x = values[0]
        axis = _norm_axis(attrs.get("axis"), x.ndim)
        return np.mean(x, axis=axis, keepdims=attrs.get("keepdims", False)), axis

    def backward(self, g, values, value, ctx, attrs, needs):
        x = values[0]
        count = int(np.prod([x.shape[a] for a in ctx])) if ctx else 1
        g = _expand_reduced(g, x.shape, ctx, attrs.get("keepdims", False))
        return (np.array(g) / count,)


class _Max(Primitive):
    """Maximum over axes; the gradient goes to the first maximum in scan order."""

    name = "max"

    def forward(self, values, attrs):
        x = values[0]
        axis = _norm_axis(attrs.get("axis"), x.ndim)
        keep = tuple(i for i in range(x.ndim) if i not in axis)
        moved = np.transpose(x, keep + axis)
        flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if attrs.get("keepdims", False):
            for a in axis:
                out = np.expand_dims(out, a)
        return out, (axis, keep, idx, flat.shape, moved.shape)

    def backward(self, g, values, value, ctx, attrs, needs):
        axis, keep, idx, flat_shape, moved_shape = ctx
        x = values[0]
        gk = g
        if attrs.get("keepdims", False):
            gk = g.reshape([x.shape[i] for i in keep])
        flat = np.zeros(flat_shape)
        np.put_along_axis(flat, idx[..., None], gk[..., None], axis=-1)
        moved = flat.reshape(moved_shape)
        return (np.transpose(moved, np.argsort(keep + axis)).copy(),)


# ---------------------------------------------------------------- shape ops


class _Reshape(Primitive):
    name = "reshape"

    def forward(self, values, attrs):
        x = values[0]
        try:
            return x.reshape(attrs["shape"]), None
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {attrs['shape']}") from None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (g.reshape(values[0].shape),)


class _Transpose(Primitive):
    name = "transpose"

    def forward(self, values, attrs):
        return np.transpose(values[0], attrs.get("axes")), None

    def backward(self, g, values, value, ctx, attrs, needs):
        axes = attrs.get("axes")
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)


class _BroadcastTo(Primitive):
    name = "broadcast"

    def forward(self, values, attrs):
        x = values[0]
        try:
            return np.broadcast_to(x, attrs["shape"]).copy(), None
        except ValueError:
            raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {attrs['shape']}") from None

    def backward(self, g, values, value, ctx, attrs, needs):
        return (unbroadcast(g, values[0].shape),)


class _GetItem(Primitive):
    name = "getitem"

    def forward(self, values, attrs):
        return np.array(values[0][attrs["index"]]), None

    def backward(self, g, values, value, ctx, attrs, needs):
        out = np.zeros_like(values[0])
        np.add.at(out, attrs["index"], g)
        return (out,)


class _Concat(Primitive):
    name = "concat"

    def forward(self, values, attrs):
        try:
            return np.concatenate(values, axis=attrs["axis"]), None
        except ValueError:
            shapes = " and ".join(str(v.shape) for v in values)
            raise ShapeError(f"concat: incompatible shapes {shapes}") from None

    def backward(self, g, values, value, ctx, attrs, needs):
        sizes = np.cumsum([v.shape[attrs["axis"]] for v in values])[:-1]
        return tuple(np.split(g, sizes, axis=attrs["axis"]))


# ---------------------------------------------------------------- linear algebra


class _MatMul(Primitive):
    name = "matmul"

    def forward(self, values, attrs):
        a, b = values
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            return np.matmul(a, b), None
        except ValueError:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(self, g, values, value, ctx, attrs, needs):
        a, b = values
        ga = gb = None
        if needs[0]:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


def same_padding(extent: int, k: int, stride: int) -> tuple[int, int]:
    """Zero padding (low, high) for 'same' output; the odd voxel goes high."""
    out = -(-extent // stride)
    total = builtins.max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def conv_output_shape(spatial, kshape, stride, padding):
    out = []
    for n, k in zip(spatial, kshape):
        lo, hi = same_padding(n, k, stride) if padding == "same" else (0, 0)
        if n + lo + hi < k:
            raise ShapeError(f"conv3d: kernel extent {k} exceeds padded input extent {n + lo + hi}")
        out.append((n + lo + hi - k) // stride + 1)
    return tuple(out)


class _Conv3d(Primitive):
    """Cross-correlation of (B, C, X, Y, Z) input with (F, C, kx, ky, kz) kernels."""

    name = "conv3d"

    def forward(self, values, attrs):
        x, w = values
        stride, padding = attrs["stride"], attrs["padding"]
        if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv3d: incompatible shapes {x.shape} and {w.shape}")
        if stride < 1 or padding not in ("valid", "same"):
            raise ShapeError(f"conv3d: bad stride/padding {stride!r}/{padding!r}")
        kshape = w.shape[2:]
        conv_output_shape(x.shape[2:], kshape, stride, padding)
        if padding == "same":
            pads = [same_padding(n, k, stride) for n, k in zip(x.shape[2:], kshape)]
            xp = np.pad(x, [(0, 0), (0, 0)] + pads)
        else:
            pads = [(0, 0)] * 3
            xp = np.ascontiguousarray(x)
        cols = _kernels.im2col3d(xp, kshape, stride)
        f = w.shape[0]
        out = np.matmul(w.reshape(f, -1), cols)
        spatial = tuple((n - k) // stride + 1 for n, k in zip(xp.shape[2:], kshape))
        return out.reshape((x.shape[0], f) + spatial), (cols, xp.shape, pads)

    def backward(self, g, values, value, ctx, attrs, needs):
        x, w = values
        cols, xp_shape, pads = ctx
        f = w.shape[0]
        g2 = g.reshape(g.shape[0], f, -1)
        gx = gw = None
        if needs[1]:
            gw = np.zeros((f, cols.shape[1]))
            for b in range(g2.shape[0]):
                gw += g2[b] @ cols[b].T
            gw = gw.reshape(w.shape)
        if needs[0]:
            dcols = np.matmul(w.reshape(f, -1).T, g2)
            gxp = _kernels.col2im3d(np.ascontiguousarray(dcols), xp_shape, w.shape[2:], attrs["stride"])
            sl = tuple(slice(lo, n - hi) for (lo, hi), n in zip(pads, xp_shape[2:]))
            gx = np.ascontiguousarray(gxp[(slice(None), slice(None)) + sl])
        return gx, gw


class _MaxPool3d(Primitive):
    name = "maxpool3d"

    def forward(self, values, attrs):
        x = values[0]
        window, stride = attrs["window"], attrs["stride"]
        for n, k in zip(x.shape[-3:], window):
            if k > n:
                raise ShapeError(f"maxpool3d: window {window} exceeds input extents {x.shape[-3:]}")
        x5 = np.ascontiguousarray(x.reshape(_as5(x.shape)))
        out, arg = _kernels.maxpool3d_forward(x5, window, stride)
        return out.reshape(x.shape[:-3] + out.shape[-3:]), (arg, x5.shape)

    def backward(self, g, values, value, ctx, attrs, needs):
        arg, x5_shape = ctx
        g5 = np.ascontiguousarray(g.reshape(arg.shape))
        gx = _kernels.maxpool3d_backward(g5, arg, x5_shape, attrs["window"], attrs["stride"])
        return (gx.reshape(values[0].shape),)


def _as5(shape):
    lead = int(np.prod(shape[:-3])) if len(shape) > 3 else 1
    return (lead, 1) + tuple(shape[-3:])


# ---------------------------------------------------------------- public API

_ADD, _SUB, _MUL, _DIV, _NEG = _Add(), _Sub(), _Mul(), _Div(), _Neg()
_EXP, _LOG, _SIGMOID, _TANH, _RELU = _Exp(), _Log(), _Sigmoid(), _Tanh(), _Relu()
_SOFTPLUS, _SQUARE, _SQRT, _CLIP = _Softplus(), _Square(), _Sqrt(), _Clip()
_SUM, _MEAN, _MAX = _Sum(), _Mean(), _Max()
_RESHAPE, _TRANSPOSE, _BROADCAST, _GETITEM, _CONCAT = (
    _Reshape(), _Transpose(), _BroadcastTo(), _GetItem(), _Concat())
_MATMUL, _CONV3D, _MAXPOOL3D = _MatMul(), _Conv3d(), _MaxPool3d()


def add(a, b) -> Node:
    return apply(_ADD, a, b)


def sub(a, b) -> Node:
    return apply(_SUB, a, b)


def mul(a, b) -> Node:
    return apply(_MUL, a, b)


def div(a, b) -> Node:
    return apply(_DIV, a, b)


def neg(a) -> Node:
    return apply(_NEG, a)


def exp(a) -> Node:
    return apply(_EXP, a)


def log(a) -> Node:
    return apply(_LOG, a)


def sigmoid(a) -> Node:
    return apply(_SIGMOID, a)


def tanh(a) -> Node:
    return apply(_TANH, a)


def relu(a) -> Node:
    return apply(_RELU, a)


def softplus(a) -> Node:
    """log(1 + e^x), linear above 30."""
    return apply(_SOFTPLUS, a)


def square(a) -> Node:
    return apply(_SQUARE, a)


def sqrt(a) -> Node:
    return apply(_SQRT, a)


def clip(a, lo: float, hi: float) -> Node:
    return apply(_CLIP, a, lo=lo, hi=hi)


def sum(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    return apply(_SUM, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Node:
    return apply(_MEAN, a, axis=axis, keepdims=keepdims)


def max(a, axis=None, keepdims=False) -> Node:  # noqa: A001
    return apply(_MAX, a, axis=axis, keepdims=keepdims)


def reshape(a, shape) -> Node:
    return apply(_RESHAPE, a, shape=tuple(shape))


def transpose(a, axes=None) -> Node:
    return apply(_TRANSPOSE, a, axes=None if axes is None else tuple(axes))


def broadcast_to(a, shape) -> Node:
    return apply(_BROADCAST, a, shape=tuple(shape))


def getitem(a, index) -> Node:
    return apply(_GETITEM, a, index=index)


def concat(nodes, axis=0) -> Node:
    return apply(_CONCAT, *nodes, axis=axis)


def matmul(a, b) -> Node:
    return apply(_MATMUL, a, b)


def conv3d(x, w, stride: int = 1, padding: str = "valid") -> Node:
    """3D cross-correlation. ``x`` is (B, C, X, Y, Z) or unbatched (C, X, Y, Z)."""
    xn = x if isinstance(x, Node) else None
    xv = x.value if xn is not None else np.asarray(x, dtype=np.float64)
    if xv.ndim == 4:
        out = apply(_CONV3D, reshape(x, (1,) + xv.shape), w, stride=stride, padding=padding)
        return reshape(out, out.shape[1:])
    return apply(_CONV3D, x, w, stride=stride, padding=padding)


def maxpool3d(x, window=2, stride=None) -> Node:
    """Max pooling over the last three axes; extents not covered by a window are dropped."""
    if isinstance(window, int):
        window = (window,) * 3
    window = tuple(int(w) for w in window)
    if stride is None:
        if len(set(window)) != 1:
            raise ShapeError("maxpool3d: anisotropic windows need an explicit stride")
        stride = window[0]
    return apply(_MAXPOOL3D, x, window=window, stride=int(stride))
