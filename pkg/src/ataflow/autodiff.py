"""Define-by-run reverse-mode automatic differentiation.

A :class:`Tape` records every operation applied to :class:`Var` handles.
Values are 64-bit floats, either scalars or flat numpy arrays (elementwise
ops broadcast like numpy).  Calling one of the module-level primitives on
plain numbers or arrays evaluates it without recording anything, so the
same model code runs with or without a tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "NumericOverflowError", "Node", "Tape", "Var", "evaluate", "backward",
    "value_and_grad", "check_gradient", "primitive",
    "add", "sub", "mul", "div", "neg", "exp", "log", "tanh", "elu",
    "softplus", "lgamma", "digamma", "atan", "sqrt", "matmul", "sum",
    "mean", "square", "value_of",
]


class NumericOverflowError(FloatingPointError):
    """A recorded intermediate value was not finite."""

    def __init__(self, node_id: int, op: str):
        super().__init__(f"numeric overflow at node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


@dataclass(slots=True)
class Node:
    id: int
    op: str
    # (parent id, local partial); the partial is either an array multiplied
    # elementwise into the incoming adjoint or a callable vjp.
    parents: tuple = ()
    value: np.ndarray | float = 0.0


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    adjoints: list | None = None

    def leaf(self, value, op: str = "input") -> "Var":
        value = np.array(value, dtype=np.float64)
        return self._push(op, value, ())

    def _push(self, op, value, parents) -> "Var":
        node_id = len(self.nodes)
        if not np.all(np.isfinite(value)):
            raise NumericOverflowError(node_id, op)
        self.nodes.append(Node(node_id, op, parents, value))
        return Var(self, node_id)

    def backward(self, output: "Var | int") -> list:
        """One reverse sweep from ``output``; fills and returns ``adjoints``."""
        out_id = output.id if isinstance(output, Var) else int(output)
        if not 0 <= out_id < len(self.nodes):
            raise IndexError(f"output id {out_id} out of range for tape of length {len(self.nodes)}")
        out_value = self.nodes[out_id].value
        if np.ndim(out_value) != 0:
            raise ValueError("backward needs a scalar output node")
        adj: list = [0.0] * len(self.nodes)
        adj[out_id] = 1.0
        for node in reversed(self.nodes[: out_id + 1]):
            g = adj[node.id]
            if node.parents and not (np.isscalar(g) and g == 0.0):
                for pid, local in node.parents:
                    contrib = local(g) if callable(local) else g * local
                    adj[pid] = adj[pid] + _unbroadcast(contrib, np.shape(self.nodes[pid].value))
        self.adjoints = [np.broadcast_to(a, np.shape(n.value)).astype(np.float64)
                         if np.isscalar(a) else a for a, n in zip(adj, self.nodes)]
        return self.adjoints

    def grad(self, wrt: "Var") -> np.ndarray:
        if self.adjoints is None:
            raise RuntimeError("call backward() first")
        return self.adjoints[wrt.id]


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, key):
        val = self.value[key]
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return out
        return self.tape._push("getitem", np.array(val, dtype=np.float64), ((self.id, vjp),))

    def sum(self, axis=None):
        return sum(self, axis)

    @property
    def T(self):
        return self.tape._push("transpose", self.value.T, ((self.id, lambda g: np.asarray(g).T),))

    def reshape(self, *shape):
        old = self.shape
        return self.tape._push("reshape", self.value.reshape(*shape),
                               ((self.id, lambda g: np.reshape(g, old)),))


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("cannot mix variables from different tapes")
    return tape


def primitive(op: str, value, parents: Sequence[tuple]):
    """Record a custom node. ``parents`` holds (operand, local partial) pairs;
    operands that are not :class:`Var` are skipped."""
    tape = _tape_of(*(p for p, _ in parents))
    if tape is None:
        return value
    links = tuple((p.id, local) for p, local in parents if isinstance(p, Var))
    return tape._push(op, np.asarray(value, dtype=np.float64), links)


def _unary(op, x, f, dfdx):
    xv = value_of(x)
    with np.errstate(all="ignore"):
        y = f(xv)
        if not isinstance(x, Var):
            return y
        return x.tape._push(op, np.asarray(y, dtype=np.float64), ((x.id, dfdx(xv, y)),))


def _binary(op, a, b, f, da, db):
    av, bv = value_of(a), value_of(b)
    with np.errstate(all="ignore"):
        y = f(av, bv)
        tape = _tape_of(a, b)
        if tape is None:
            return y
        parents = []
        if isinstance(a, Var):
            parents.append((a.id, da(av, bv, y)))
        if isinstance(b, Var):
            parents.append((b.id, db(av, bv, y)))
        return tape._push(op, np.asarray(y, dtype=np.float64), tuple(parents))


def add(a, b):
    return _binary("add", a, b, np.add, lambda a, b, y: 1.0, lambda a, b, y: 1.0)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda a, b, y: 1.0, lambda a, b, y: -1.0)


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda a, b, y: b, lambda a, b, y: a)


def div(a, b):
    return _binary("div", a, b, np.divide, lambda a, b, y: 1.0 / b, lambda a, b, y: -y / b)


def neg(x):
    return _unary("neg", x, np.negative, lambda x, y: -1.0)


def square(x):
    return mul(x, x)


def exp(x):
    return _unary("exp", x, np.exp, lambda x, y: y)


def log(x):
    return _unary("log", x, np.log, lambda x, y: 1.0 / x)


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda x, y: 1.0 - y * y)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu(x):
    return _unary("elu", x, _elu, lambda x, y: np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0))))


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    return _unary("softplus", x, _softplus, lambda x, y: _sigmoid(x))


def atan(x):
    return _unary("atan", x, np.arctan, lambda x, y: 1.0 / (1.0 + x * x))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda x, y: 0.5 / y)


# Lanczos approximation, g = 7, nine coefficients.
_LANCZOS_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993, 676.5203681218851, -1259.1392167224028,
    771.32342877765313, -176.61502916214059, 12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _lanczos_terms(x):
    z = x - 1.0
    k = np.arange(1, 9)
    denom = z[..., None] + k
    a = _LANCZOS[0] + np.sum(_LANCZOS[1:] / denom, axis=-1)
    da = -np.sum(_LANCZOS[1:] / denom**2, axis=-1)
    t = z + _LANCZOS_G + 0.5
    return z, a, da, t


def _lgamma(x):
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    xr = np.where(small, 1.0 - x, x)
    z, a, _, t = _lanczos_terms(xr)
    big = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(a)
    refl = np.log(np.pi / np.abs(np.sin(np.pi * x))) - big
    return np.where(small, refl, big)


def digamma(x):
    """Derivative of the Lanczos lgamma, with reflection below 0.5."""
    x = np.asarray(x, dtype=np.float64)
    small = x < 0.5
    xr = np.where(small, 1.0 - x, x)
    z, a, da, t = _lanczos_terms(xr)
    big = np.log(t) + (z + 0.5) / t - 1.0 + da / a
    with np.errstate(all="ignore"):
        refl = big - np.pi / np.tan(np.pi * x)
    return np.where(small, refl, big)


def lgamma(x):
    return _unary("lgamma", x, _lgamma, lambda x, y: digamma(x))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    y = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return y
    parents = []
    if isinstance(a, Var):
        if np.ndim(bv) == 1:
            parents.append((a.id, lambda g: np.multiply.outer(g, bv)))
        else:
            parents.append((a.id, lambda g: g @ bv.T))
    if isinstance(b, Var):
        if np.ndim(av) == 1:
            parents.append((b.id, lambda g: np.multiply.outer(av, g)))
        else:
            parents.append((b.id, lambda g: av.T @ g))
    return tape._push("matmul", np.asarray(y, dtype=np.float64), tuple(parents))


def sum(x, axis=None):
    xv = value_of(x)
    y = np.sum(xv, axis=axis)
    if not isinstance(x, Var):
        return y
    shape = np.shape(xv)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)
    return x.tape._push("sum", np.asarray(y, dtype=np.float64), ((x.id, vjp),))


def mean(x, axis=None):
    n = np.size(value_of(x)) if axis is None else np.shape(value_of(x))[axis]
    return sum(x, axis) / n


def evaluate(fn: Callable, inputs):
    """Run ``fn`` on a fresh tape. Returns (value, tape, input var, output var)."""
    tape = Tape()
    x = tape.leaf(inputs)
    out = fn(x)
    if not isinstance(out, Var):
        out = tape._push("const", np.asarray(out, dtype=np.float64), ())
    return out.value, tape, x, out


def backward(tape: Tape, output_id: int) -> list:
    return tape.backward(output_id)


def value_and_grad(fn: Callable, inputs):
    value, tape, x, out = evaluate(fn, inputs)
    tape.backward(out)
    return float(value), tape.grad(x)


class GradientCheck(NamedTuple):
    max_rel_err: float
    nan_count: int
    analytic: np.ndarray
    numeric: np.ndarray


def check_gradient(fn: Callable, point, step: float = 1e-5) -> GradientCheck:
    """Compare reverse-mode gradients with central differences at ``point``.

    Error per component is |a - b| / max(1, |a|, |b|).
    """
    point = np.array(point, dtype=np.float64)
    _, analytic = value_and_grad(fn, point)
    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        with np.errstate(all="ignore"):
            fp = float(fn(hi.reshape(point.shape)))
            fm = float(fn(lo.reshape(point.shape)))
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    bad = ~np.isfinite(numeric)
    a, b = analytic[~bad], numeric[~bad]
    err = np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return GradientCheck(float(err.max()) if err.size else 0.0, int(bad.sum()), analytic, numeric)
