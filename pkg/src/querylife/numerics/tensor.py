"""Dense tensors and the tape that records operations on them.

A :class:`Tensor` wraps a numpy array.  Operations in :mod:`querylife.numerics.ops`
append a node to the innermost active :class:`Graph` whenever one of their
inputs requires a gradient; :func:`backward` then walks that tape in reverse.
Outside a ``with Graph():`` block nothing is recorded, which is how inference
runs.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_local = threading.local()


class NumericDomainError(ArithmeticError):
    """A primitive produced or was handed a non-finite / out-of-domain value."""


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


def _stack() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def default_dtype() -> type:
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created in ("float32"/"float64")."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = default_dtype()
    _local.dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        is_array = isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype.kind == "f" or requires_grad or (not is_array and arr.dtype.kind in "biu"):
            # plain python numbers are values, integer ndarrays are ids
            arr = np.ascontiguousarray(arr, dtype=default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in ops.
    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.scale(other, -1.0))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Ordered record of primitive applications.

    Use as a context manager; nested graphs shadow outer ones.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
        return backward(self, loss, params)


def active_graph() -> Graph | None:
    s = _stack()
    return s[-1] if s else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording, even inside an enclosing Graph."""
    s = _stack()
    saved = list(s)
    s.clear()
    try:
        yield
    finally:
        s.extend(saved)


def backward(graph: Graph, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaves that require grad get ``.grad`` set.  Returns gradients keyed by
    name: for ``params`` if given (unreachable ones are zero), otherwise for
    every named leaf reached.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in graph._produced and not loss.requires_grad:
        raise ValueError("loss is not reachable from any recorded node")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in graph._produced:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    if id(loss) in grads and id(loss) not in graph._produced:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        t.grad = grads[key]

    if params is not None:
        out = {}
        for name, p in params.items():
            g = grads.get(id(p)) if id(p) in leaves else None
            out[name] = g if g is not None else np.zeros_like(p.data)
            p.grad = out[name]
        return out
    return {t.name: t.grad for t in leaves.values() if t.name is not None}
