"""Reverse-mode differentiation over numpy arrays."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class GraphError(RuntimeError):
    """Misuse of the computation graph (double backward, NaN, non-scalar loss)."""


class Tensor:
    """An array plus the recipe to push gradients back to its parents.

    ``backward_fn`` maps the gradient w.r.t. this tensor to a tuple of
    gradients w.r.t. ``parents`` (``None`` for parents that need none).
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "_spent")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward_fn: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        The graph is released afterwards; a second call raises.
        """
        if self._spent:
            raise GraphError("backward() called twice on the same graph; rebuild the forward pass")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise GraphError(f"non-finite loss {self.data}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node.backward_fn is not None:
                node._spent = True
                node.parents = ()
                node.backward_fn = None
        self._spent = True


def needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t.backward_fn is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def result(data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Build an op output; constant-only inputs produce a constant."""
    if not np.isfinite(data).all():
        raise GraphError("operation produced non-finite values")
    if any(needs_grad(p) for p in parents):
        return Tensor(data, parents=parents, backward_fn=backward_fn)
    return Tensor(data)
