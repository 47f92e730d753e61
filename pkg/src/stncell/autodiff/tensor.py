"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tensor` owns a numpy buffer and, when it takes part in a
differentiable computation, references to its parent tensors plus a closure
mapping the upstream gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and *adds* into ``.grad`` of every reachable tensor that requires a
gradient, so two backward passes without a reset accumulate twice the
gradient.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError
from .branches import note_branch

_node_ids = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def _as_array(values) -> np.ndarray:
    if isinstance(values, np.ndarray) and values.dtype in (np.float32, np.float64):
        return values
    return np.asarray(values, dtype=np.float64)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """n-dimensional array that records the operations applied to it."""

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "",
    ):
        self.values = _as_array(values)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = _grad_enabled and (bool(requires_grad) or any(p.requires_grad for p in parents))
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None
        self.node_id = next(_node_ids)
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        if self.values.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        pending = {self.node_id: np.ones_like(self.values)}
        for node in reversed(order):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg

    # -- elementwise arithmetic ---------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = lift(other)
        a, b = self.shape, other.shape
        return Tensor(
            self.values + other.values,
            parents=(self, other),
            backward_fn=lambda g: (unbroadcast(g, a), unbroadcast(g, b)),
            op="add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor(-self.values, parents=(self,), backward_fn=lambda g: (-g,), op="neg")

    def __sub__(self, other) -> "Tensor":
        other = lift(other)
        a, b = self.shape, other.shape
        return Tensor(
            self.values - other.values,
            parents=(self, other),
            backward_fn=lambda g: (unbroadcast(g, a), unbroadcast(-g, b)),
            op="sub",
        )

    def __rsub__(self, other) -> "Tensor":
        return lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = lift(other)
        x, y = self.values, other.values
        return Tensor(
            x * y,
            parents=(self, other),
            backward_fn=lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)),
            op="mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = lift(other)
        x, y = self.values, other.values
        return Tensor(
            x / y,
            parents=(self, other),
            backward_fn=lambda g: (
                unbroadcast(g / y, x.shape),
                unbroadcast(-g * x / (y * y), y.shape),
            ),
            op="div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return lift(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.values
        p = float(exponent)
        return Tensor(
            x**p,
            parents=(self,),
            backward_fn=lambda g: (g * p * x ** (p - 1),),
            op="pow",
        )

    def __matmul__(self, other) -> "Tensor":
        other = lift(other)
        x, y = self.values, other.values
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise DimensionError(f"matmul expects [n,k]@[k,m], got {x.shape} and {y.shape}")
        return Tensor(
            x @ y,
            parents=(self, other),
            backward_fn=lambda g: (g @ y.T, x.T @ g),
            op="matmul",
        )

    # -- reductions and reshaping --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(
            self.values.sum(axis=axis, keepdims=keepdims),
            parents=(self,),
            backward_fn=backward,
            op="sum",
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.values.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {old} to {shape}") from exc
        return Tensor(out, parents=(self,), backward_fn=lambda g: (g.reshape(old),), op="reshape")

    def transpose(self, *axes) -> "Tensor":
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor(
            self.values.transpose(axes),
            parents=(self,),
            backward_fn=lambda g: (g.transpose(inverse),),
            op="transpose",
        )

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        dtype = self.values.dtype

        basic = _is_basic_index(index)

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            if basic:
                out[index] += g
            else:
                np.add.at(out, index, g)
            return (out,)

        return Tensor(self.values[index], parents=(self,), backward_fn=backward, op="getitem")

    # -- elementwise functions ----------------------------------------------
    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.values)
        return Tensor(out, parents=(self,), backward_fn=lambda g: (g * 0.5 / out,), op="sqrt")

    def exp(self) -> "Tensor":
        out = np.exp(self.values)
        return Tensor(out, parents=(self,), backward_fn=lambda g: (g * out,), op="exp")

    def log(self) -> "Tensor":
        x = self.values
        return Tensor(np.log(x), parents=(self,), backward_fn=lambda g: (g / x,), op="log")

    def clamp_min(self, floor: float) -> "Tensor":
        """Elementwise ``max(x, floor)``; the gradient is zero where clamped."""
        x = self.values
        mask = x > floor
        note_branch(lambda: (mask,))
        return Tensor(
            np.where(mask, x, floor),
            parents=(self,),
            backward_fn=lambda g: (g * mask,),
            op="clamp_min",
        )


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis`` with gradient routing back to each piece."""
    tensors = [lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor(out, parents=tensors, backward_fn=backward, op="concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [lift(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
        expanded.append(t.reshape(tuple(shape)))
    return concat(expanded, axis=axis)


def _topological_order(root: Tensor) -> list:
    """Parents-before-children ordering of every node reachable from ``root``."""
    order = []
    visited = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack_.append((node, True))
        for parent in node._parents:
            if parent.node_id not in visited:
                stack_.append((parent, False))
    return order
