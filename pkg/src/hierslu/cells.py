"""Recurrent cells, a bidirectional driver, dense layers and embedding tables.

GRU convention used everywhere::

    z  = sigmoid(x W_z + h U_z + b_z)
    r  = sigmoid(x W_r + h U_r + b_r)
    h~ = tanh(x W_h + (r * h) U_h + b_h)
    h' = (1 - z) * h + z * h~

LSTM uses gates ordered (input, forget, output, candidate) with the
forget-gate bias initialised to 1.

Input-side projections are computed for a whole sequence with a single
matmul and sliced per step; adding a context vector "as an extra input at
every step" is realised as a separate context weight block whose product
is added to every row, which equals concatenating the context to each
token input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    k = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-k, k, size=shape or (fan_in, fan_out))


class ParameterStore(dict):
    """Ordered mapping ``name -> Node``; names follow ``<module>.<layer>.<weight|bias>``."""

    def add(self, name: str, value) -> Node:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        node = ad.parameter(value)
        self[name] = node
        return node

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.items()}

    def load_arrays(self, arrays) -> None:
        missing = set(self) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, node in self.items():
            value = np.asarray(arrays[name], dtype=ad.DTYPE)
            if value.shape != node.value.shape:
                raise ShapeError(f"load {name}", node.value.shape, value.shape)
            node.value = value.copy()


@dataclass
class Dense:
    weight: Node
    bias: Node

    @classmethod
    def create(cls, store: ParameterStore, name: str, n_in: int, n_out: int,
               rng: np.random.Generator, bias_init: float = 0.0) -> "Dense":
        return cls(store.add(f"{name}.weight", glorot(rng, n_in, n_out)),
                   store.add(f"{name}.bias", np.full(n_out, bias_init)))

    def __call__(self, x, activation: Optional[str] = None) -> Node:
        return dense(self.weight, self.bias, x, activation)


def dense(W, b, x, activation: Optional[str] = None) -> Node:
    """``activation(x @ W + b)``; ``x`` may be a vector or a matrix of row vectors."""
    y = ad.matmul(x, W) + b
    if activation is None or activation == "none":
        return y
    if activation == "relu":
        return ad.relu(y)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class Embedding:
    table: Node

    @classmethod
    def create(cls, store: ParameterStore, name: str, vocab_size: int, dim: int,
               rng: np.random.Generator) -> "Embedding":
        return cls(store.add(f"{name}.weight", rng.uniform(-0.1, 0.1, size=(vocab_size, dim))))

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def __call__(self, ids) -> Node:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise IndexError(f"token id out of range for vocabulary of {self.table.shape[0]}")
        return ad.take(self.table, ids)


@dataclass
class GRUCellParams:
    input_size: int
    hidden_size: int
    w_input: Node        # (input, 3d): columns [z | r | h~]
    w_hidden: Node       # (d, 2d): columns [z | r]
    w_candidate: Node    # (d, d)
    bias: Node           # (3d,)
    w_context: Optional[Node] = None  # (context, 3d), position A/C side input

    @classmethod
    def create(cls, store: ParameterStore, name: str, input_size: int, hidden_size: int,
               rng: np.random.Generator, context_size: int = 0) -> "GRUCellParams":
        d = hidden_size
        fan_in = input_size + context_size + d
        w_in = np.concatenate([glorot(rng, fan_in, d, (input_size, d)) for _ in range(3)], axis=1)
        w_h = np.concatenate([glorot(rng, fan_in, d, (d, d)) for _ in range(2)], axis=1)
        params = cls(input_size, d,
                     store.add(f"{name}.input.weight", w_in),
                     store.add(f"{name}.hidden.weight", w_h),
                     store.add(f"{name}.candidate.weight", glorot(rng, fan_in, d, (d, d))),
                     store.add(f"{name}.gates.bias", np.zeros(3 * d)))
        if context_size:
            ctx = np.concatenate([glorot(rng, fan_in, d, (context_size, d)) for _ in range(3)], axis=1)
            params.w_context = store.add(f"{name}.context.weight", ctx)
        return params


@dataclass
class LSTMCellParams:
    input_size: int
    hidden_size: int
    w_input: Node        # (input, 4d): columns [i | f | o | g]
    w_hidden: Node       # (d, 4d)
    bias: Node           # (4d,)
    w_context: Optional[Node] = None

    @classmethod
    def create(cls, store: ParameterStore, name: str, input_size: int, hidden_size: int,
               rng: np.random.Generator, context_size: int = 0,
               forget_bias: float = 1.0) -> "LSTMCellParams":
        d = hidden_size
        fan_in = input_size + context_size + d
        w_in = np.concatenate([glorot(rng, fan_in, d, (input_size, d)) for _ in range(4)], axis=1)
        w_h = np.concatenate([glorot(rng, fan_in, d, (d, d)) for _ in range(4)], axis=1)
        b = np.zeros(4 * d)
        b[d:2 * d] = forget_bias
        params = cls(input_size, d,
                     store.add(f"{name}.input.weight", w_in),
                     store.add(f"{name}.hidden.weight", w_h),
                     store.add(f"{name}.gates.bias", b))
        if context_size:
            ctx = np.concatenate([glorot(rng, fan_in, d, (context_size, d)) for _ in range(4)], axis=1)
            params.w_context = store.add(f"{name}.context.weight", ctx)
        return params


def _check_vec(op, v: Node, n: int):
    if v.value.ndim != 1 or v.shape[0] != n:
        raise ShapeError(op, v.shape, (n,))


def _gru_from_projection(p: GRUCellParams, xproj: Node, h: Node) -> Node:
    d = p.hidden_size
    gates = ad.sigmoid(ad.take(xproj, slice(0, 2 * d)) + h @ p.w_hidden)
    z = ad.take(gates, slice(0, d))
    r = ad.take(gates, slice(d, 2 * d))
    cand = ad.tanh(ad.take(xproj, slice(2 * d, 3 * d)) + (r * h) @ p.w_candidate)
    return h + z * (cand - h)


def _lstm_from_projection(p: LSTMCellParams, xproj: Node, h: Node, c: Node):
    d = p.hidden_size
    pre = xproj + h @ p.w_hidden
    gates = ad.sigmoid(ad.take(pre, slice(0, 3 * d)))
    i = ad.take(gates, slice(0, d))
    f = ad.take(gates, slice(d, 2 * d))
    o = ad.take(gates, slice(2 * d, 3 * d))
    g = ad.tanh(ad.take(pre, slice(3 * d, 4 * d)))
    c_new = f * c + i * g
    return o * ad.tanh(c_new), c_new


def gru_step(params: GRUCellParams, x, h_prev, context=None) -> Node:
    """One GRU update; returns the new hidden state."""
    x, h_prev = ad.as_node(x), ad.as_node(h_prev)
    _check_vec("gru_step(x)", x, params.input_size)
    _check_vec("gru_step(h)", h_prev, params.hidden_size)
    proj = x @ params.w_input + params.bias
    if context is not None:
        proj = proj + ad.as_node(context) @ params.w_context
    return _gru_from_projection(params, proj, h_prev)


def lstm_step(params: LSTMCellParams, x, state, context=None):
    """One LSTM update; ``state`` is ``(h, c)`` and ``(h', c')`` is returned."""
    h, c = (ad.as_node(s) for s in state)
    x = ad.as_node(x)
    _check_vec("lstm_step(x)", x, params.input_size)
    _check_vec("lstm_step(h)", h, params.hidden_size)
    _check_vec("lstm_step(c)", c, params.hidden_size)
    proj = x @ params.w_input + params.bias
    if context is not None:
        proj = proj + ad.as_node(context) @ params.w_context
    return _lstm_from_projection(params, proj, h, c)


def _sequence_grad(compute):
    """Share one backward computation between all parents of a fused node."""
    cache = {}

    def for_parent(k):
        def fn(g):
            if cache.get("g") is not g:
                cache["g"], cache["grads"] = g, compute(g)
            return cache["grads"][k]
        return fn
    return for_parent


def gru_sequence(params: GRUCellParams, proj: Node, h0: Node, reverse: bool = False) -> Node:
    """GRU over all rows of a precomputed input projection, as one fused node.

    ``proj`` is ``(M, 3d)`` (input projection plus bias and any context
    term); the result is the ``(M, d)`` matrix of hidden states in input
    order. Backpropagation through time is done in :func:`_gru_bptt`.
    """
    P, h = proj.value, h0.value
    Wh, U = params.w_hidden.value, params.w_candidate.value
    d, M = params.hidden_size, P.shape[0]
    order = range(M - 1, -1, -1) if reverse else range(M)
    H = np.empty((M, d))
    cache = []
    for m in order:
        gates = ad._sigmoid(P[m, :2 * d] + h @ Wh)
        z, r = gates[:d], gates[d:]
        rh = r * h
        cand = np.tanh(P[m, 2 * d:] + rh @ U)
        cache.append((m, h, z, r, rh, cand))
        h = h + z * (cand - h)
        H[m] = h

    def compute(dH):
        dP = np.zeros_like(P)
        carry = np.zeros(d)
        for m, h_prev, z, r, rh, cand in reversed(cache):
            dh = dH[m] + carry
            dcand = dh * z * (1.0 - cand * cand)
            dz = dh * (cand - h_prev) * z * (1.0 - z)
            drh = dcand @ U.T
            dr = drh * h_prev * r * (1.0 - r)
            dgates = np.concatenate([dz, dr])
            dP[m, :2 * d] = dgates
            dP[m, 2 * d:] = dcand
            carry = dh * (1.0 - z) + drh * r + dgates @ Wh.T
        rows = [step[0] for step in cache]
        # weight gradients as one product over all steps
        dWh = np.stack([step[1] for step in cache]).T @ dP[rows, :2 * d]
        dU = np.stack([step[4] for step in cache]).T @ dP[rows, 2 * d:]
        return dP, carry, dWh, dU

    grads = _sequence_grad(compute)
    return ad._make(H, [(proj, grads(0)), (h0, grads(1)), (params.w_hidden, grads(2)),
                        (params.w_candidate, grads(3))], "gru_sequence")


def lstm_sequence(params: LSTMCellParams, proj: Node, h0: Node, reverse: bool = False) -> Node:
    """LSTM counterpart of :func:`gru_sequence`; the initial cell state is zero."""
    P, h = proj.value, h0.value
    Wh = params.w_hidden.value
    d, M = params.hidden_size, P.shape[0]
    order = range(M - 1, -1, -1) if reverse else range(M)
    H = np.empty((M, d))
    c = np.zeros(d)
    cache = []
    for m in order:
        pre = P[m] + h @ Wh
        gates = ad._sigmoid(pre[:3 * d])
        i, f, o = gates[:d], gates[d:2 * d], gates[2 * d:]
        g = np.tanh(pre[3 * d:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        cache.append((m, h, c, i, f, o, g, tc))
        h, c = o * tc, c_new
        H[m] = h

    def compute(dH):
        dP = np.zeros_like(P)
        dh_carry, dc_carry = np.zeros(d), np.zeros(d)
        for m, h_prev, c_prev, i, f, o, g, tc in reversed(cache):
            dh = dH[m] + dh_carry
            do = dh * tc
            dc = dc_carry + dh * o * (1.0 - tc * tc)
            dpre = np.concatenate([dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f),
                                   do * o * (1.0 - o), dc * i * (1.0 - g * g)])
            dP[m] = dpre
            dh_carry = dpre @ Wh.T
            dc_carry = dc * f
        rows = [step[0] for step in cache]
        dWh = np.stack([step[1] for step in cache]).T @ dP[rows]
        return dP, dh_carry, dWh

    grads = _sequence_grad(compute)
    return ad._make(H, [(proj, grads(0)), (h0, grads(1)), (params.w_hidden, grads(2))], "lstm_sequence")


def run_rnn(kind: str, params, inputs: Node, init: Optional[Node] = None,
            context: Optional[Node] = None, reverse: bool = False, fused: bool = True):
    """Run a unidirectional cell over the rows of ``inputs``.

    Returns ``(final_hidden, outputs)`` where ``outputs`` is the ``(M, d)``
    matrix of hidden states in input order. ``fused=False`` builds the
    graph step by step from :func:`gru_step`-style primitives instead.
    """
    if kind not in ("gru", "lstm"):
        raise ValueError(f"unknown cell kind {kind!r}")
    inputs = ad.as_node(inputs)
    if inputs.value.ndim != 2 or inputs.shape[0] == 0:
        raise ShapeError("rnn", inputs.shape)
    if inputs.shape[1] != params.input_size:
        raise ShapeError("rnn", inputs.shape, (None, params.input_size))
    d = params.hidden_size
    h = ad.as_node(init) if init is not None else ad.constant(np.zeros(d))
    _check_vec("rnn(init)", h, d)
    proj = inputs @ params.w_input + params.bias
    if context is not None:
        if params.w_context is None:
            raise ValueError("cell was built without a context input")
        proj = proj + ad.as_node(context) @ params.w_context
    last = 0 if reverse else inputs.shape[0] - 1
    if fused:
        seq = gru_sequence if kind == "gru" else lstm_sequence
        H = seq(params, proj, h, reverse)
        return ad.take(H, last), H
    c = ad.constant(np.zeros(d))
    steps = range(inputs.shape[0] - 1, -1, -1) if reverse else range(inputs.shape[0])
    outputs = [None] * inputs.shape[0]
    for m in steps:
        row = ad.take(proj, m)
        if kind == "gru":
            h = _gru_from_projection(params, row, h)
        else:
            h, c = _lstm_from_projection(params, row, h, c)
        outputs[m] = h
    return h, ad.stack(outputs)


def birnn(kind: str, params_fwd, params_bwd, inputs, init_fwd=None, init_bwd=None,
          context=None, fused: bool = True):
    """Bidirectional RNN.

    Returns ``(final, per_token)`` where ``final`` concatenates the final
    forward and backward states and ``per_token`` is an ``(M, 2d)`` matrix
    of concatenated per-step outputs.
    """
    f_final, f_out = run_rnn(kind, params_fwd, inputs, init_fwd, context, fused=fused)
    b_final, b_out = run_rnn(kind, params_bwd, inputs, init_bwd, context, reverse=True, fused=fused)
    return ad.concat([f_final, b_final]), ad.concat([f_out, b_out], axis=1)
