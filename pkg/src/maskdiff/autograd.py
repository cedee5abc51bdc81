"""Tensor type and reverse-mode differentiation.

A :class:`Tensor` wraps a float32 or float64 numpy array. Operations in
:mod:`maskdiff.ops` build a graph of ``Tensor`` nodes whenever gradients
are enabled and at least one input requires a gradient; :meth:`Tensor.backward`
walks that graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError

_GRAD_ENABLED = contextvars.ContextVar("maskdiff_grad_enabled", default=True)

PRECISIONS = {"single": np.float32, "double": np.float64}

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def check_finite(arr: np.ndarray, what: str) -> None:
    # a non-finite sum is a cheap necessary condition; confirm before raising
    # so that a float overflow of the sum alone is not reported
    s = arr.sum()
    if not np.isfinite(s) and not np.isfinite(arr).all():
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NonFiniteError(f"{what} produced {bad} non-finite value(s) (shape {arr.shape})")


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, precision: str | None = None, name: str | None = None):
        if precision is not None:
            arr = np.asarray(data, dtype=PRECISIONS[precision])
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}, op={self.op}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> "ComputeGraph":
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        graph = ComputeGraph(self)
        graph.backward(grad)
        return graph

    # operator sugar; the real definitions live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap the output of a primitive, recording it in the graph when needed."""
    check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class ComputeGraph:
    """Nodes reachable from an output, in topological order."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS post-order; recursion would overflow on deep graphs
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                if node.is_leaf and node.requires_grad:
                    self.leaves.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

    def backward(self, grad: np.ndarray) -> None:
        out = self.output
        if not out.requires_grad:
            return
        pending: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype).reshape(out.shape)}
        # buffers allocated here may be updated in place; anything else may be
        # aliased by another node's gradient and is copied before mutation
        owned: set[int] = set()
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            owned.discard(id(node))
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if isinstance(pg, SliceGrad):
                    buf = pending.get(key)
                    if buf is None:
                        buf = np.zeros(parent.shape, dtype=pg.grad.dtype)
                    elif key not in owned:
                        buf = buf.copy()
                    buf[..., pg.start:pg.stop] += pg.grad
                    pending[key] = buf
                    owned.add(key)
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(f"{node.op} backward produced grad {pg.shape} for input {parent.shape}")
                if key not in pending:
                    pending[key] = pg
                elif key in owned:
                    pending[key] += pg
                else:
                    pending[key] = pending[key] + pg
                    owned.add(key)


class SliceGrad:
    """Gradient that is nonzero only on ``[..., start:stop]`` of its input."""

    __slots__ = ("start", "stop", "grad")

    def __init__(self, start: int, stop: int, grad: np.ndarray):
        self.start, self.stop, self.grad = start, stop, grad
