"""Dense float32 tensors with a tape for reverse-mode differentiation.

Only the handful of operations the enhancement network needs are provided
(see :mod:`veinfpn.tensor.ops`). Every op is a pair of plain numpy functions
(forward and backward); the :class:`Tensor` wrapper only records which
backward to call and with which saved values.
"""

from __future__ import annotations

import sys
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from ..errors import ParameterError

DTYPE = np.float32

# modules that bind DTYPE at import time and follow ``precision``
_DTYPE_MODULES = ("veinfpn.tensor.core", "veinfpn.tensor.ops", "veinfpn.tensor.optim", "veinfpn.trainer")


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily run the engine in ``dtype`` (float64 for gradient checks)."""
    mods = [sys.modules[m] for m in _DTYPE_MODULES if m in sys.modules]
    saved = [m.DTYPE for m in mods]
    for m in mods:
        m.DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        for m, d in zip(mods, saved):
            m.DTYPE = d

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An NCHW float32 array, optionally tracking its gradient.

    Scalars (0-d) are allowed for loss values; every op that consumes image
    data checks for four dimensions itself.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "") -> None:
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim not in (0, 4):
            raise ParameterError(f"tensor must be 0-d or NCHW, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def from_op(
        cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn
    ) -> "Tensor":
        """Wrap an op result, attaching ``backward`` when any parent needs grad."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name!r}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        ``grad`` defaults to one for scalars; non-scalar outputs need an
        explicit cotangent of the same shape.
        """
        if grad is None:
            if self.data.ndim != 0:
                raise ParameterError("backward() on a non-scalar needs an explicit grad")
            grad = np.ones((), dtype=DTYPE)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ParameterError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        order = _topological(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, outputs before inputs."""
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    post.reverse()
    return post


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
