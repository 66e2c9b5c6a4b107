"""Differentiable primitives over :class:`Tensor`.

Every function computes its value with numpy, checks it is finite, and, when
an input requires a gradient and a graph is active, records a node carrying
its vector-Jacobian product.  There is no implicit broadcasting: operands of
``add``/``mul`` must have equal shapes, and bias-style broadcasting goes
through ``add_bias``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Node, NumericDomainError, ShapeError, Tensor, active_graph

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(value).all():
        raise NumericDomainError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = None
    out.requires_grad = False
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record(Node(op, inputs, out, vjp))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast_matmul(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------- arithmetic

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a 2-D right operand is shared."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} vs {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError(f"matmul: left operand rank below right {a.shape} vs {b.shape}")
    av, bv = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast_matmul(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _finish("matmul", av @ bv, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("add", a, b)
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x, bias) -> Tensor:
    """x[..., k] + bias[k]: the one sanctioned broadcast."""
    x, bias = _wrap(x), _wrap(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {bias.shape}")
    axes = tuple(range(x.ndim - 1))
    return _finish("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _finish("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)
    return _finish("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = _wrap(x)
    y = np.exp(x.data)
    return _finish("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _wrap(x)
    if (x.data <= 0).any():
        raise NumericDomainError("log of a non-positive value")
    xv = x.data
    return _finish("log", np.log(xv), (x,), lambda g: (g / xv,))


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _finish("relu", x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = _wrap(x)
    xv = x.data
    inner = _SQRT_2_OVER_PI * (xv + 0.044715 * xv**3)
    t = np.tanh(inner)
    y = 0.5 * xv * (1.0 + t)

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xv**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return _finish("gelu", y.astype(xv.dtype, copy=False), (x,), vjp)


# ------------------------------------------------------------------ reductions

def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _wrap(x)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _finish("sum", np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    n = x.data.size if axis is None else x.shape[axis]
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, g / n, dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _finish("mean", np.asarray(x.data.mean(axis=axis)), (x,), vjp)


# --------------------------------------------------------------------- shapes

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from err
    return _finish("reshape", y, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(_wrap(x) for x in xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _finish("concat", np.concatenate([t.data for t in xs], axis=ax), xs,
                   lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice(x, key) -> Tensor:  # noqa: A001 - basic-slicing primitive
    """Basic (view) indexing, e.g. ``slice(h, (slice(None), 0))`` for CLS states."""
    x = _wrap(x)
    shape, dtype = x.shape, x.dtype
    y = np.ascontiguousarray(x.data[key])

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _finish("slice", y, (x,), vjp)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by an integer index array (repeats allowed)."""
    x = _wrap(x)
    idx = np.asarray(indices.data if isinstance(indices, Tensor) else indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError("take: indices must be integers")
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"take: index out of range for extent {n}")
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _finish("take", np.take(x.data, idx, axis=axis), (x,), vjp)


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``."""
    return take(weight, ids, axis=0)


# ------------------------------------------------------- normalising kernels

def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", y, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", y, (x,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shape {gamma.shape}/{beta.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    axes = tuple(range(x.ndim - 1))

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _finish("layer_norm", y, (x, gamma, beta), vjp)


def l2_normalize(x, axis: int = -1, floor: float = 1e-12) -> Tensor:
    x = _wrap(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm < floor).any():
        raise NumericDomainError("l2_normalize of a zero-norm vector")
    y = x.data / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _finish("l2_normalize", y, (x,), vjp)


PRIMITIVES = {
    "matmul": matmul, "add": add, "add_bias": add_bias, "mul": mul, "scale": scale,
    "transpose": transpose, "reshape": reshape, "concat": concat, "slice": slice,
    "take": take, "softmax": softmax, "log_softmax": log_softmax, "layer_norm": layer_norm,
    "gelu": gelu, "relu": relu, "l2_normalize": l2_normalize, "exp": exp, "log": log,
    "mean": mean, "sum": sum, "embedding": embedding,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by primitive name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)
