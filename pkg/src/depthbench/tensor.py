"""Dense float64 tensors with a tape-free reverse-mode autodiff graph.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient onto the parents' gradients. ``backward``
walks the graph in reverse topological (i.e. reverse execution) order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_op_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._order = -1
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("operation produced non-finite values")
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._order = next(_op_counter)
        return out

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators delegate to ops ---------------------------------------------
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _topo_order(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    # execution order is recorded at creation; reverse it exactly
    nodes.sort(key=lambda t: t._order, reverse=True)
    return nodes


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    pending = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in _topo_order(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
    if loss._backward is None:
        loss.grad = grad if loss.grad is None else loss.grad + grad


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
