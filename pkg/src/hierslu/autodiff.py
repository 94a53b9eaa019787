"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every model equation in the package is written with the ops defined here.
Values are at most rank 2. Gradients accumulate additively; callers zero
parameter gradients between optimizer steps (see :func:`zero_grads`).
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when the operands of an op are not conformable."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class Node:
    """A value in a computation graph together with its accumulated gradient."""

    __slots__ = ("value", "_grad", "parents", "requires_grad", "op", "__weakref__")

    def __init__(self, value, parents: Sequence[tuple["Node", Callable]] = (),
                 requires_grad: bool = False, op: str = "leaf"):
        value = np.asarray(value, dtype=DTYPE)
        if value.ndim > 2:
            raise ShapeError(op, value.shape)
        self.value = value
        self._grad = None
        self.requires_grad = requires_grad
        # Parents are only kept when gradients can flow through them.
        self.parents = tuple(parents) if requires_grad else ()
        self.op = op
        tape = _current_tape()
        if tape is not None:
            tape.nodes.append(self)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.array(g, dtype=DTYPE).reshape(self.value.shape)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=DTYPE)
        else:
            self._grad += g

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def parameter(value) -> Node:
    """A trainable leaf."""
    return Node(value, requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


class Tape:
    """Records every Node created while active, in creation order.

    Creation order is a topological order, since a node can only be built
    from nodes that already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _current_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


class no_grad:
    """Context manager: ops inside build no graph (inference only)."""

    def __enter__(self):
        self._prev = getattr(_local, "no_grad", False)
        _local.no_grad = True
        return self

    def __exit__(self, *exc):
        _local.no_grad = self._prev
        return False


def _make(value, parents, op) -> Node:
    if getattr(_local, "no_grad", False):
        return Node(value, op=op)
    live = [(p, fn) for p, fn in parents if p.requires_grad]
    return Node(value, live, requires_grad=bool(live), op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value,
                 [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))],
                 "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value,
                 [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))],
                 "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv,
                 [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                  (b, lambda g: _unbroadcast(g * av, bv.shape))],
                 "mul")


def matmul(a, b) -> Node:
    """Matrix product for rank-1/rank-2 operands, following numpy semantics."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul", av.shape, bv.shape)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)

    def grad_a(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv) if av.ndim == 2 else g * bv
        return g @ bv.T

    def grad_b(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return _make(av @ bv, [(a, grad_a), (b, grad_b)], "matmul")


# ---------------------------------------------------------------------------
# structural ops

def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat", ())
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[v.shape for v in values]) from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    parents = []
    for i, n in enumerate(nodes):
        parents.append((n, (lambda i: lambda g: np.split(g, bounds, axis=axis)[i])(i)))
    return _make(out, parents, "concat")


def stack(nodes: Sequence) -> Node:
    """Stack equal-length vectors as the rows of a matrix."""
    nodes = [as_node(n) for n in nodes]
    shapes = {n.shape for n in nodes}
    if not nodes or len(shapes) != 1 or nodes[0].value.ndim != 1:
        raise ShapeError("stack", *[n.shape for n in nodes])
    out = np.stack([n.value for n in nodes])
    parents = [(n, (lambda i: lambda g: g[i])(i)) for i, n in enumerate(nodes)]
    return _make(out, parents, "stack")


def take(a, index) -> Node:
    """Row/element selection (``a[index]``). Integer arrays act as embedding lookup."""
    a = as_node(a)
    av = a.value
    try:
        out = av[index]
    except IndexError:
        raise ShapeError("take", av.shape, np.shape(index)) from None
    out = np.array(out, dtype=DTYPE)
    fancy = isinstance(index, (np.ndarray, list))

    def grad(g):
        full = np.zeros_like(av)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return full

    return _make(out, [(a, grad)], "take")


def reshape(a, shape) -> Node:
    a = as_node(a)
    s = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", s, shape) from None
    return _make(out, [(a, lambda g: g.reshape(s))], "reshape")


def total(a) -> Node:
    """Sum of all entries, as a scalar node."""
    a = as_node(a)
    s = a.shape
    return _make(np.array(a.value.sum()), [(a, lambda g: np.broadcast_to(g, s).copy())], "sum")


def mean_of(nodes: Sequence) -> Node:
    """Elementwise mean over a non-empty set of same-shaped nodes."""
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("mean", ())
    if len({n.shape for n in nodes}) != 1:
        raise ShapeError("mean", *[n.shape for n in nodes])
    k = len(nodes)
    out = np.mean(np.stack([n.value for n in nodes]), axis=0)
    return _make(out, [(n, lambda g: g / k) for n in nodes], "mean")


def mean_rows(a) -> Node:
    """Mean over the rows of a matrix."""
    a = as_node(a)
    if a.value.ndim != 2 or a.shape[0] == 0:
        raise ShapeError("mean_rows", a.shape)
    n, s = a.shape[0], a.shape
    return _make(a.value.mean(axis=0), [(a, lambda g: np.broadcast_to(g / n, s).copy())], "mean_rows")


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)], "relu")


def tanh(a) -> Node:
    a = as_node(a)
    y = np.tanh(a.value)
    return _make(y, [(a, lambda g: g * (1.0 - y * y))], "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so large |x| never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Node:
    a = as_node(a)
    y = _sigmoid(a.value)
    return _make(y, [(a, lambda g: g * y * (1.0 - y))], "sigmoid")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a) -> Node:
    """Softmax over the last axis."""
    a = as_node(a)
    y = _softmax(a.value)

    def grad(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _make(y, [(a, grad)], "softmax")


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits, targets) -> Node:
    """Summed negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` is a vector with a scalar target, or a matrix with one target
    per row.
    """
    logits = as_node(logits)
    x = logits.value
    t = np.asarray(targets, dtype=np.int64)
    x2 = x.reshape(1, -1) if x.ndim == 1 else x
    t1 = t.reshape(-1)
    if x2.shape[0] != t1.shape[0]:
        raise ShapeError("softmax_cross_entropy", x.shape, t.shape)
    logp = _log_softmax(x2)
    rows = np.arange(t1.shape[0])
    loss = -logp[rows, t1].sum()

    def grad(g):
        d = np.exp(logp)
        d[rows, t1] -= 1.0
        return (g * d).reshape(x.shape)

    return _make(np.array(loss), [(logits, grad)], "softmax_xent")


def sigmoid_cross_entropy(logits, targets) -> Node:
    """Summed binary cross-entropy of 0/1 ``targets`` against sigmoid(logits)."""
    logits = as_node(logits)
    x = logits.value
    z = np.asarray(targets, dtype=DTYPE)
    if z.shape != x.shape:
        raise ShapeError("sigmoid_cross_entropy", x.shape, z.shape)
    # max(x,0) - x z + log(1 + exp(-|x|))
    loss = (np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))).sum()
    p = _sigmoid(x)
    return _make(np.array(loss), [(logits, lambda g: g * (p - z))], "sigmoid_xent")


# ---------------------------------------------------------------------------
# backward pass

def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node, tape: Optional[Tape] = None) -> None:
    """Accumulate d(root)/d(node) into every reachable node that requires grad.

    With ``tape`` given, its creation order is used instead of a graph walk;
    ``root`` must have been recorded on it.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = tape.nodes if tape is not None else _topological(root)
    root._accumulate(np.ones_like(root.value))
    for node in reversed(order):
        g = node._grad
        if g is None or not node.parents:
            continue
        for parent, fn in node.parents:
            parent._accumulate(fn(g))


def zero_grads(params: Iterable[Node]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """ADAM with bias-corrected moment estimates.

    ``m``/``v`` are keyed by parameter name so the state can be checkpointed
    alongside the parameters.
    """

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Node]) -> None:
        for name, p in params.items():
            if p._grad is None:
                raise ValueError(f"adam_step: parameter {name!r} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p._grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "epsilon": self.epsilon, "t": self.t}


def adam_step(params: Mapping[str, Node], state: Adam) -> None:
    state.step(params)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad
