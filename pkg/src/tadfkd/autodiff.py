"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` owns every tensor created during one forward pass. Nodes are
appended in creation order, so the list is already topologically sorted and
:meth:`Graph.backward` only has to walk it once in reverse.

Typical use::

    g = Graph()
    w = g.param(np.ones((3, 2)), "w")
    x = g.const(batch)
    loss = mean(relu(x @ w))
    grads = g.backward(loss, {"w": w})

Graphs are cheap and single-use: build a new one for every forward/backward.
"""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import InvalidAxis, NotScalar, ShapeMismatch

EPS = 1e-8

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("data", "graph", "node_id", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, graph: "Graph", requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = data
        self.graph = graph
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.node_id = graph._append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Graph:
    """Append-only record of the tensors produced in one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _append(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def param(self, value: ArrayLike, name: Optional[str] = None) -> Tensor:
        return Tensor(_as_array(value), self, requires_grad=True, name=name)

    def const(self, value: ArrayLike) -> Tensor:
        return Tensor(_as_array(value), self)

    def backward(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each tensor in ``params``.

        Parameters that did not take part in the forward pass get zeros.
        """
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.get(node.node_id)
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        out = {}
        for key, p in params.items():
            g = grads.get(p.node_id) if p.graph is self else None
            out[key] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.data.shape)
        return out


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _lift(x, graph: Graph) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise ValueError("tensors from different graphs cannot be combined")
        return x
    return graph.const(x)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one operand must be a Tensor")


def _node(data, parents, backward_fn) -> Tensor:
    graph = parents[0].graph
    req = any(p.requires_grad for p in parents)
    return Tensor(data, graph, requires_grad=req, parents=tuple(parents), backward_fn=backward_fn if req else None)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _binary(a, b):
    graph = _graph_of(a, b)
    a, b = _lift(a, graph), _lift(b, graph)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"incompatible shapes {a.shape} and {b.shape}") from None
    return a, b


# ---------------------------------------------------------------------------
# binary ops


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    """Elementwise ``a / b`` with ``|b|`` clamped to at least EPS (sign kept)."""
    a, b = _binary(a, b)
    small = np.abs(b.data) < EPS
    den = np.where(small, np.where(b.data < 0, -EPS, EPS), b.data)
    out = a.data / den

    def backward(g):
        ga = _unbroadcast(g / den, a.shape)
        gb = np.where(small, 0.0, -g * out / den)
        return ga, _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    graph = _graph_of(a, b)
    a, b = _lift(a, graph), _lift(b, graph)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# unary ops


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    """Natural log of ``max(x, EPS)``; no gradient below the clamp."""
    clamped = x.data < EPS
    safe = np.where(clamped, EPS, x.data)
    return _node(np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),))


def sqrt(x: Tensor) -> Tensor:
    # gradient at 0 is taken as 0, like the L1 subgradient below
    y = np.sqrt(np.maximum(x.data, 0.0))
    pos = y > 0

    def backward(g):
        return (np.where(pos, g * 0.5 / np.where(pos, y, 1.0), 0.0),)

    return _node(y, (x,), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


_UNARY = {"relu": relu, "tanh": tanh, "exp": exp, "log": log, "abs": abs, "neg": neg, "sqrt": sqrt, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *inputs, factor: float = 1.0) -> Tensor:
    """Dispatch by name; ``scale`` uses ``factor``."""
    if kind == "scale":
        (x,) = inputs
        return scale(x, factor)
    if kind in _UNARY:
        (x,) = inputs
        return _UNARY[kind](x)
    if kind in _BINARY:
        return _BINARY[kind](*inputs)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(x: Tensor, axes) -> tuple:
    if axes is None:
        return tuple(range(x.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -x.data.ndim <= ax < x.data.ndim:
            raise InvalidAxis(f"axis {ax} out of range for shape {x.shape}")
        out.append(ax % x.data.ndim)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None, keepdims=False) -> Tensor:  # noqa: A001
    ax = _norm_axes(x, axes)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.data, axis=ax, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axes=None, keepdims=False) -> Tensor:
    ax = _norm_axes(x, axes)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    return scale(sum(x, ax, keepdims), 1.0 / count)


def reduce(kind: str, x: Tensor, axes=None, keepdims=False) -> Tensor:
    if kind == "sum":
        return sum(x, axes, keepdims)
    if kind == "mean":
        return mean(x, axes, keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


def take_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; gradient is scattered back to the source rows."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), backward)


def transpose(x: Tensor) -> Tensor:
    return _node(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"softmax expects batch x classes, got {logits.shape}")
    if logits.shape[1] < 2:
        raise ShapeMismatch("softmax needs at least two classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (logits,), backward)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(
    f: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: Mapping[str, ArrayLike],
    eps: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` receives a fresh graph and a dict of parameter leaves and must
    return a scalar tensor. Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    base = {k: _as_array(v) for k, v in params.items()}

    g = Graph()
    leaves = {k: g.param(v, k) for k, v in base.items()}
    analytic = g.backward(f(g, leaves), leaves)

    def value(arrays):
        g2 = Graph()
        return float(f(g2, {k: g2.param(v, k) for k, v in arrays.items()}).data.reshape(-1)[0])

    worst = 0.0
    for key, arr in base.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[key].reshape(-1)[i] += eps
            minus[key].reshape(-1)[i] -= eps
            numeric = (value(plus) - value(minus)) / (2 * eps)
            err = np.abs(analytic[key].reshape(-1)[i] - numeric) / max(1.0, np.abs(numeric))
            worst = max(worst, float(err))
    return worst
