"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive op applied during one forward pass.
Leaves are created with :meth:`Tape.param` (named, differentiable) or
:meth:`Tape.const` (frozen). :meth:`Tape.backward` walks the record in reverse
and returns gradients for every named leaf.

All arrays are float64 and batch-first.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised when a tape is used outside its contract."""


class ShapeError(ValueError):
    """Raised on operand dimension mismatch."""


class Node:
    __slots__ = ("tape", "value", "parents", "vjp", "name", "index", "op")

    def __init__(self, tape, value, parents, vjp, name=None, op="leaf"):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.op = op
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.kinks: list[np.ndarray] = []

    def _push(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def param(self, value, name: str) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._push(Node(self, value, (), None, name=name))

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        return self._push(Node(self, value, (), None, op="const"))

    def bind(self, params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Node]:
        """Lift a parameter dict onto the tape (frozen when ``trainable`` is False)."""
        if trainable:
            return {k: self.param(v, k) for k, v in params.items()}
        return {k: self.const(v) for k, v in params.items()}

    def record(self, value, parents: Sequence[Node], vjp: Callable, op: str) -> Node:
        return self._push(Node(self, value, tuple(parents), vjp, op=op))

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise TapeError("node belongs to a different tape")
            return x
        return self.const(x)

    def backward(self, out: Node, seed: float = 1.0, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Reverse-mode gradients of scalar ``out`` w.r.t. every named leaf.

        Leaves that do not influence ``out`` receive zero gradients.
        """
        if not isinstance(out, Node) or out.tape is not self:
            raise TapeError("output node is not recorded on this tape")
        if out.index < 0 or self.nodes[out.index] is not out:
            raise TapeError("tape is incomplete: output node missing from record")
        if out.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {out.value.shape}")
        grads: list[np.ndarray | None] = [None] * (out.index + 1)
        grads[out.index] = np.full(out.value.shape, float(seed))
        for i in range(out.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.vjp is None and parent.name is None:
                    continue
                j = parent.index
                grads[j] = pg if grads[j] is None else grads[j] + pg
        names = set(wrt) if wrt is not None else None
        result = {}
        for node in self.nodes:
            if node.name is None or (names is not None and node.name not in names):
                continue
            g = grads[node.index] if node.index < len(grads) else None
            result[node.name] = np.zeros_like(node.value) if g is None else g
        return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TapeError("at least one operand must be a tape node")


# elementwise ---------------------------------------------------------------

def add(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = t.lift(a), t.lift(b)
    sa, sb = a.value.shape, b.value.shape
    return t.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = t.lift(a), t.lift(b)
    sa, sb = a.value.shape, b.value.shape
    return t.record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Node:
    t = _tape_of(a, b)
    a, b = t.lift(a), t.lift(b)
    av, bv = a.value, b.value
    return t.record(av * bv, (a, b),
                    lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(a: Node, c: float) -> Node:
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,), "scale")


def leaky_relu(x: Node, slope: float) -> Node:
    """Leaky ReLU; the derivative at 0 is the right derivative (1)."""
    v = x.value
    pos = v >= 0
    x.tape.kinks.append(v)
    d = np.where(pos, 1.0, slope)
    return x.tape.record(np.where(pos, v, slope * v), (x,), lambda g: (g * d,), "leaky_relu")


def relu(x: Node) -> Node:
    return leaky_relu(x, 0.0)


def sigmoid(x: Node) -> Node:
    v = x.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return x.tape.record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Node) -> Node:
    """log(1 + e^x), overflow-safe."""
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return x.tape.record(out, (x,), lambda g: (g * sig,), "softplus")


def clip(x: Node, lo: float, hi: float) -> Node:
    v = x.value
    x.tape.kinks.append(v - lo)
    x.tape.kinks.append(v - hi)
    inside = (v >= lo) & (v <= hi)
    return x.tape.record(np.clip(v, lo, hi), (x,), lambda g: (g * inside,), "clip")


def square(x: Node) -> Node:
    v = x.value
    return x.tape.record(v * v, (x,), lambda g: (2.0 * g * v,), "square")


# reductions ----------------------------------------------------------------

def sum_all(x: Node) -> Node:
    shape = x.value.shape
    return x.tape.record(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Node) -> Node:
    shape = x.value.shape
    n = x.value.size
    if n == 0:
        raise ShapeError("mean over an empty array")
    return x.tape.record(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def row_sq_norm(x: Node) -> Node:
    """Per-row squared L2 norm of a (B, ...) array -> (B,)."""
    v = x.value
    axes = tuple(range(1, v.ndim))
    return x.tape.record((v * v).sum(axis=axes), (x,),
                         lambda g: (2.0 * v * g.reshape(g.shape + (1,) * len(axes)),), "row_sq_norm")


def mean_sq_norm(x: Node) -> Node:
    """Batch mean of per-row squared L2 norms."""
    v = x.value
    n = v.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    return x.tape.record(np.asarray((v * v).sum() / n), (x,), lambda g: (2.0 * float(g) / n * v,), "mean_sq_norm")


def logsumexp(x: Node) -> Node:
    """log(sum(exp(x))) over all entries, max-shifted."""
    v = x.value
    m = v.max()
    e = np.exp(v - m)
    s = e.sum()
    return x.tape.record(np.asarray(m + np.log(s)), (x,), lambda g: (float(g) * e / s,), "logsumexp")


# structure -----------------------------------------------------------------

def reshape(x: Node, shape) -> Node:
    old = x.value.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Node], axis: int = -1) -> Node:
    t = _tape_of(*xs)
    xs = [t.lift(x) for x in xs]
    sizes = [x.value.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return t.record(np.concatenate([x.value for x in xs], axis=axis), xs,
                    lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def take_rows(x: Node, idx: np.ndarray) -> Node:
    """Row gather ``x[idx]``; used for within-batch shuffles."""
    v = x.value
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros_like(v)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record(v[idx], (x,), vjp, "take_rows")


# linear maps ---------------------------------------------------------------

def linear(x: Node, W, b) -> Node:
    """Batched ``x @ W.T + b`` with x (B, in), W (out, in), b (out,)."""
    t = _tape_of(x, W, b)
    x, W, b = t.lift(x), t.lift(W), t.lift(b)
    xv, Wv = x.value, W.value
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[1] or b.value.shape != (Wv.shape[0],):
        raise ShapeError(f"linear: x{xv.shape} W{Wv.shape} b{b.value.shape}")
    out = xv @ Wv.T + b.value
    return t.record(out, (x, W, b), lambda g: (g @ Wv, g.T @ xv, g.sum(axis=0)), "linear")


def style_linear(x: Node, W, b) -> Node:
    """Per-style affine map: x (B, k, in), W (k, out, in), b (k, out).

    Row ``j`` of each sample only sees ``W[j]`` and ``b[j]``.
    """
    t = _tape_of(x, W, b)
    x, W, b = t.lift(x), t.lift(W), t.lift(b)
    xv, Wv = x.value, W.value
    if (xv.ndim != 3 or Wv.ndim != 3 or xv.shape[1] != Wv.shape[0] or xv.shape[2] != Wv.shape[2]
            or b.value.shape != Wv.shape[:2]):
        raise ShapeError(f"style_linear: x{xv.shape} W{Wv.shape} b{b.value.shape}")
    out = np.einsum("bki,koi->bko", xv, Wv) + b.value

    def vjp(g):
        return (np.einsum("bko,koi->bki", g, Wv), np.einsum("bko,bki->koi", g, xv), g.sum(axis=0))

    return t.record(out, (x, W, b), vjp, "style_linear")
