"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive appends one node to a :class:`Tape` holding its forward
value and a closure mapping the node's adjoint to its parents' adjoints.
``Tape.backward`` walks the nodes in reverse once; a tape is single-use.

>>> tape = Tape()
>>> x = tape.variable(3.0)
>>> tape.backward(x * x)[x]
array(6.)
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tape", "Var", "Gradients", "TapeError",
    "add", "sub", "mul", "neg", "matvec", "matmul", "sigmoid", "tanh", "relu",
    "concat", "stack", "slice_", "reshape", "sum_sq", "total", "lstm_cell",
]


class TapeError(RuntimeError):
    """Misuse of a tape: reuse after backward, foreign Vars, non-scalar seed."""


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "node_id")
    __array_priority__ = 1000  # make ndarray <op> Var defer to Var

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.node_id]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(node={self.node_id}, shape={self.shape})"

    def __hash__(self):
        return hash((id(self.tape), self.node_id))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.node_id == self.node_id

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


class Gradients(dict):
    """Mapping from input :class:`Var` to its gradient array."""


class Tape:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._needs: list[bool] = []
        self._inputs: list[int] = []
        self._consumed = False

    def __len__(self):
        return len(self.values)

    def _check_open(self):
        if self._consumed:
            raise TapeError("tape already consumed by backward(); record a new tape")

    def _leaf(self, value, needs_grad: bool) -> Var:
        self._check_open()
        arr = np.array(value, dtype=np.float64)  # private copy
        self.values.append(arr)
        self._parents.append(())
        self._vjps.append(None)
        self._needs.append(needs_grad)
        if needs_grad:
            self._inputs.append(len(self.values) - 1)
        return Var(self, len(self.values) - 1)

    def variable(self, value) -> Var:
        """Differentiable input."""
        return self._leaf(value, True)

    def constant(self, value) -> Var:
        """Input excluded from gradients."""
        return self._leaf(value, False)

    def push(self, value: np.ndarray, parents: Sequence[Var], vjp: Callable) -> Var:
        """Record an op result. ``vjp(g)`` returns one adjoint (or None) per parent."""
        self._check_open()
        ids = tuple(p.node_id for p in parents)
        self.values.append(value)
        self._parents.append(ids)
        self._vjps.append(vjp)
        self._needs.append(any(self._needs[i] for i in ids))
        return Var(self, len(self.values) - 1)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeError("Var belongs to a different tape")
            return x
        return self.constant(x)

    def backward(self, output: Var, wrt: Iterable[Var] | None = None) -> Gradients:
        """Gradients of scalar ``output`` with respect to every variable.

        Variables the output does not depend on get zero gradients.
        """
        self._check_open()
        if output.tape is not self:
            raise TapeError("output belongs to a different tape")
        if output.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        self._consumed = True

        adj: list[np.ndarray | None] = [None] * (output.node_id + 1)
        adj[output.node_id] = np.ones_like(output.value)
        needs, parents, vjps = self._needs, self._parents, self._vjps
        for i in range(output.node_id, -1, -1):
            g = adj[i]
            if g is None or vjps[i] is None:
                continue
            for p, gp in zip(parents[i], vjps[i](g)):
                if gp is None or not needs[p]:
                    continue
                adj[p] = gp if adj[p] is None else adj[p] + gp

        targets = self._inputs if wrt is None else [v.node_id for v in wrt]
        grads = Gradients()
        for i in targets:
            g = adj[i] if i < len(adj) else None
            grads[Var(self, i)] = np.zeros_like(self.values[i]) if g is None else g
        return grads


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_operands(a, b):
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    return tape, a, b


def add(a, b) -> Var:
    tape, a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return tape.push(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape, a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return tape.push(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    """Elementwise (broadcasting) product."""
    tape, a, b = _binary_operands(a, b)
    av, bv = a.value, b.value
    return tape.push(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a: Var) -> Var:
    return a.tape.push(-a.value, (a,), lambda g: (-g,))


def matvec(w, x) -> Var:
    """``w @ x`` for a matrix ``w`` (m, n) and vector ``x`` (n,)."""
    tape = _tape_of(w, x)
    w, x = tape.lift(w), tape.lift(x)
    wv, xv = w.value, x.value
    if wv.ndim != 2 or xv.ndim != 1 or wv.shape[1] != xv.shape[0]:
        raise ValueError(f"matvec shape mismatch: {wv.shape} @ {xv.shape}")
    return tape.push(wv @ xv, (w, x), lambda g: (np.outer(g, xv), wv.T @ g))


def matmul(a, b) -> Var:
    """``a @ b`` with ``a`` of shape (..., n) and ``b`` a matrix (n, m)."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = g @ bv.T
        a2 = av.reshape(-1, av.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return tape.push(av @ bv, (a, b), vjp)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Var) -> Var:
    s = _sigmoid(a.value)
    return a.tape.push(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return a.tape.push(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.push(np.maximum(a.value, 0.0), (a,), lambda g: (g * mask,))


def concat(parts: Sequence, axis: int = -1) -> Var:
    tape = _tape_of(*parts)
    parts = [tape.lift(p) for p in parts]
    vals = [p.value for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape.push(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence, axis: int = 0) -> Var:
    tape = _tape_of(*parts)
    parts = [tape.lift(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)
    n = len(parts)
    return tape.push(out, parts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def slice_(a: Var, index) -> Var:
    """Basic-indexing view ``a[index]`` (ints, slices, Ellipsis)."""
    src = a.value
    out = src[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, src):
        out = out.copy()
    else:
        out = np.asarray(out, dtype=np.float64)

    def vjp(g):
        full = np.zeros_like(src)
        full[index] += g
        return (full,)

    return a.tape.push(out, (a,), vjp)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.push(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_sq(a: Var) -> Var:
    """Scalar sum of squared entries."""
    v = a.value
    return a.tape.push(np.asarray(np.sum(v * v)), (a,), lambda g: (2.0 * g * v,))


def total(a: Var) -> Var:
    """Scalar sum of entries."""
    shape = a.shape
    return a.tape.push(np.asarray(np.sum(a.value)), (a,), lambda g: (np.full(shape, g),))


def lstm_cell(x, h, c, w, b) -> tuple[Var, Var]:
    """Fused LSTM cell on batched rows; returns ``(h_new, c_new)``.

    ``x`` is (B, d_in), ``h`` and ``c`` are (B, u), ``w`` is (4u, d_in + u)
    with gate blocks ordered input, forget, candidate, output.
    """
    tape = _tape_of(x, h, c, w, b)
    x, h, c, w, b = (tape.lift(v) for v in (x, h, c, w, b))
    xv, hv, cv, wv, bv = x.value, h.value, c.value, w.value, b.value
    u = hv.shape[-1]
    if (xv.ndim != 2 or hv.shape != cv.shape or hv.shape[0] != xv.shape[0]
            or wv.shape != (4 * u, xv.shape[1] + u) or bv.shape != (4 * u,)):
        raise ValueError(
            f"lstm_cell shape mismatch: x{xv.shape} h{hv.shape} c{cv.shape} "
            f"w{wv.shape} b{bv.shape}")
    h_new, c_new, gates, tc = kernels.lstm_forward(xv, hv, cv, wv, bv)

    def vjp(g):
        dh = np.ascontiguousarray(g[:, :u])
        dc = np.ascontiguousarray(g[:, u:])
        return kernels.lstm_backward(dh, dc, xv, hv, cv, wv, gates, tc)

    node = tape.push(np.concatenate([h_new, c_new], axis=1), (x, h, c, w, b), vjp)
    return slice_(node, (slice(None), slice(0, u))), slice_(node, (slice(None), slice(u, None)))
