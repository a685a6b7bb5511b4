"""Tensor type and the reverse pass.

Each op result records its inputs and a local gradient rule. Nodes are
numbered in creation order, which is a topological order of the graph, so
the backward pass simply visits reachable nodes from the highest number
down. Leaves accumulate ``grad`` across backward calls until ``zero_grad``.
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import GradError, NumericError, ShapeError

_counter = itertools.count()


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "op", "seq", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"
        self.seq = next(_counter)
        self._consumed = False

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(values, parents, backward_fn, op: str) -> Tensor:
    """Record an op. ``backward_fn(grad)`` returns one gradient (or None) per parent."""
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    if not np.all(np.isfinite(out.values)):
        raise NumericError(f"{op} produced non-finite values")
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.values.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not depend on any tensor with requires_grad=True")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.seq in nodes:
            continue
        if t._consumed:
            raise GradError(f"{t.op} node was already differentiated through; rebuild the graph")
        nodes[t.seq] = t
        stack.extend(p for p in t.parents if p.requires_grad)

    grads = {loss.seq: np.ones_like(loss.values)}
    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        g = grads.pop(seq, None)
        if g is None:
            continue
        if t.backward_fn is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t.parents, t.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise GradError(f"{t.op}: gradient shape {pg.shape} != input shape {p.shape}")
            grads[p.seq] = grads[p.seq] + pg if p.seq in grads else pg
    for t in nodes.values():
        if t.backward_fn is not None:
            t._consumed = True
            t.backward_fn = None
