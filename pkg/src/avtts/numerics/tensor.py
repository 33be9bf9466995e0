"""Dense tensors with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. :func:`backward` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, (np.ndarray, np.generic)):
        value = np.asarray(value)
        if dtype is not None and value.dtype != dtype:
            return value.astype(dtype)
        if not np.issubdtype(value.dtype, np.floating):
            return value.astype(DEFAULT_DTYPE)
        return value
    return np.asarray(value, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """An n-d float array that can take part in a differentiable graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
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
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        from . import ops
        return ops.mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        graph = Graph(self)
        grads = _run_backward(self, graph)
        for node in graph.nodes:
            if node.backward_fn is None and node.requires_grad:
                g = grads.get(id(node))
                if g is not None:
                    node.grad = g if node.grad is None else node.grad + g


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; the graph edge is only kept if a parent needs gradients."""
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


class Graph:
    """Nodes reachable from ``output`` that require gradients, in topological order."""

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.output = output
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)


def _run_backward(loss: Tensor, graph: Graph | None = None) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"gradient shape {pg.shape} does not match operand {parent.shape} in {node.op}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]):
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Returns a dict when ``params`` is a mapping, otherwise a list in the same
    order. Parameters the loss does not depend on get zero arrays.
    """
    grads = _run_backward(loss)
    if isinstance(params, Mapping):
        return {
            name: grads[id(p)] if id(p) in grads else np.zeros_like(p.data)
            for name, p in params.items()
        }
    return [grads[id(p)] if id(p) in grads else np.zeros_like(p.data) for p in params]
