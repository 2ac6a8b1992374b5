"""Tensor value type and the reverse-mode tape.

A :class:`Tensor` is a thin handle around a numpy array with a unique id.
Operations in :mod:`accunet.ops` append a node to the active :class:`Tape`
whenever one of their inputs is tracked; ``tape.backward(loss)`` then walks
the nodes in reverse and returns gradients keyed by tensor id.

Usage::

    with Tape() as tape:
        y = ops.conv2d(x, w)
        loss = ops.sum(y * y)
    grads = tape.backward(loss)
    grads[w.id]
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count(1)


class ShapeError(ValueError):
    pass


class DivisibilityError(ShapeError):
    pass


class NumericError(ArithmeticError):
    pass


class DegenerateBatchError(ValueError):
    pass


class Tensor:
    """Dense float array with an identity used for gradient lookup."""

    __slots__ = ("data", "id", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.id = next(_ids)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from accunet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from accunet import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from accunet import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from accunet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from accunet import ops
        return ops.mul(self, -1.0)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    out: int
    inputs: tuple
    op: str
    backward: BackwardFn


@dataclass
class Tape:
    """Single-use record of differentiable operations.

    Only one tape is active at a time (nested tapes shadow the outer one).
    """

    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)
    _produced: set = field(default_factory=set, repr=False)
    _watched: set = field(default_factory=set, repr=False)

    def __enter__(self) -> "Tape":
        _stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack.remove(self)

    def watch(self, t: Tensor) -> Tensor:
        """Track a tensor that does not have ``requires_grad`` set."""
        self._watched.add(t.id)
        return t

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.id in self._produced or t.id in self._watched

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> None:
        self.nodes.append(Node(out.id, tuple(t.id for t in inputs), op, backward))
        self._produced.add(out.id)

    def backward(self, loss: Tensor) -> dict:
        """Gradients of a scalar ``loss`` w.r.t. every tracked leaf tensor."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.id not in self._produced:
            raise ValueError("loss tensor was not produced on this tape")
        grads = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            for tid, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                prev = grads.get(tid)
                grads[tid] = gi if prev is None else prev + gi
        self.nodes.clear()
        self.grads = grads
        return grads

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        return self.grads.get(t.id)


_stack: list = []


def active_tape() -> Optional[Tape]:
    return _stack[-1] if _stack else None


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)
