"""Dense float64 tensors with a tape-free reverse-mode graph.

Every op result keeps references to its inputs plus a closure mapping the
output gradient to input gradients.  Creation order doubles as the
topological order, so ``backward`` only has to sort reachable nodes by
their creation counter.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from soco.errors import InvalidInputError, NumericError

_order = itertools.count()
_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _local.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward: BackwardFn | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self._order = next(_order)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{grad})"

    # Operator sugar; the real implementations live in ``ops``.
    def __add__(self, other):
        from soco.numerics import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from soco.numerics import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from soco.numerics import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from soco.numerics import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from soco.numerics import ops
        return ops.scale(self, -1.0)


def parameter(data) -> Tensor:
    """Leaf tensor that gradients are collected for."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording the graph edge when gradients are needed."""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output from {op}")
    parents = tuple(parents)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, parents, backward)
    return Tensor(data, False, op)


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(loss)/d(w) for each tensor in ``wrt``.

    Leaves that the loss does not depend on get a zero gradient.  Nothing is
    stored on the tensors, so calling this twice on the same graph yields
    identical results.
    """
    if loss.data.size != 1:
        raise InvalidInputError(f"loss must be scalar, got shape {loss.shape}")
    keep = {id(w) for w in wrt}
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if not node.requires_grad or id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(node.parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        if node._backward is None:
            continue
        g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [np.array(grads[id(w)]) if id(w) in grads else np.zeros_like(w.data) for w in wrt]
