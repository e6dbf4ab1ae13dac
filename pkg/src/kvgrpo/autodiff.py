"""Reverse-mode differentiation on a small explicit tape, plus a finite-difference oracle.

Every operation here accepts either plain ``numpy`` arrays or tape-backed
:class:`Var` handles.  With array-only inputs the functions evaluate eagerly in
numpy and return arrays, so model code written against this module runs
unchanged in a fast value-only mode (used by ``fd_grad`` and by rollouts, which
never need gradients).  As soon as one operand is a :class:`Var`, the result is
recorded on the tape and :func:`grad` can backpropagate through it.

All numerics are float64.  Evaluation is pure with respect to the parameter
vector, and backpropagation visits nodes in a fixed reverse order, so repeated
calls with identical inputs produce bit-identical values and gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .params import GradVector, Params

Array = np.ndarray

# Marker for a constant operand (no gradient flows into it).
_CONST = -1


class Tape:
    """Append-only record of operations for one reverse-mode evaluation."""

    def __init__(self) -> None:
        self._values: list[Array] = []
        # Per node: (parent indices, backward fn mapping output adjoint to
        # per-parent adjoint contributions, aligned with the parent tuple).
        self._parents: list[tuple[int, ...]] = []
        self._backwards: list[Callable[[Array], tuple] | None] = []

    def push(self, value, parents: tuple[int, ...], backward) -> "Var":
        self._values.append(value)
        self._parents.append(parents)
        self._backwards.append(backward)
        return Var(self, len(self._values) - 1)

    def leaf(self, value) -> "Var":
        return self.push(value, (), None)

    def value_of(self, idx: int):
        return self._values[idx]

    def backward(self, output: "Var") -> list:
        """Adjoints of every node with respect to a scalar ``output``."""
        n = output.idx + 1
        adj: list = [None] * n
        adj[output.idx] = np.float64(1.0)
        for i in range(output.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            bwd = self._backwards[i]
            if bwd is None:
                continue
            contributions = bwd(g)
            for p, contrib in zip(self._parents[i], contributions):
                if p == _CONST or contrib is None:
                    continue
                adj[p] = contrib if adj[p] is None else adj[p] + contrib
        return adj


class Var:
    """Handle to one tape node.  Supports the arithmetic used by the models."""

    __slots__ = ("tape", "idx")
    # Keep numpy from absorbing Vars into object arrays; binary ops then fall
    # back to the reflected methods below.
    __array_ufunc__ = None

    def __init__(self, tape: Tape, idx: int) -> None:
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.value_of(self.idx)

    @property
    def shape(self):
        return np.shape(self.value)

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
        return mul(self, -1.0)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Var(idx={self.idx}, shape={self.shape})"


def value(x):
    """Underlying numeric value of a Var, array, or scalar."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _operand(x, tape: Tape):
    """Split an operand into (value, parent index)."""
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x.value, x.idx
    return x, _CONST


# ---------------------------------------------------------------------------
# Elementwise and scalar arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.add(value(a), value(b))
    av, ai = _operand(a, tape)
    bv, bi = _operand(b, tape)
    out = np.add(av, bv)

    def bwd(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))

    return tape.push(out, (ai, bi), bwd)


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.subtract(value(a), value(b))
    av, ai = _operand(a, tape)
    bv, bi = _operand(b, tape)
    out = np.subtract(av, bv)

    def bwd(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(-g, np.shape(bv))

    return tape.push(out, (ai, bi), bwd)


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return np.multiply(value(a), value(b))
    av, ai = _operand(a, tape)
    bv, bi = _operand(b, tape)
    out = np.multiply(av, bv)

    def bwd(g):
        return _unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))

    return tape.push(out, (ai, bi), bwd)


def _unbroadcast(g, shape) -> Array:
    """Reduce a gradient to the shape of the operand it belongs to."""
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    # Sum out leading broadcast axes, then any axis of size 1.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def tanh(x):
    tape = _tape_of(x)
    if tape is None:
        return np.tanh(x)
    xv, xi = _operand(x, tape)
    out = np.tanh(xv)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return tape.push(out, (xi,), bwd)


def exp(x):
    tape = _tape_of(x)
    if tape is None:
        return np.exp(x)
    xv, xi = _operand(x, tape)
    out = np.exp(xv)

    def bwd(g):
        return (g * out,)

    return tape.push(out, (xi,), bwd)


def log(x):
    tape = _tape_of(x)
    if tape is None:
        return np.log(x)
    xv, xi = _operand(x, tape)
    out = np.log(xv)

    def bwd(g):
        return (g / xv,)

    return tape.push(out, (xi,), bwd)


def square(x):
    tape = _tape_of(x)
    if tape is None:
        xv = value(x)
        return xv * xv
    xv, xi = _operand(x, tape)
    out = xv * xv

    def bwd(g):
        return (2.0 * g * xv,)

    return tape.push(out, (xi,), bwd)


def minimum(a, b):
    """Elementwise minimum; at ties the gradient follows the first operand."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.minimum(value(a), value(b))
    av, ai = _operand(a, tape)
    bv, bi = _operand(b, tape)
    out = np.minimum(av, bv)
    take_a = av <= bv

    def bwd(g):
        return g * take_a, g * ~take_a

    return tape.push(out, (ai, bi), bwd)


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; the gradient passes through on the closed interval."""
    tape = _tape_of(x)
    if tape is None:
        return np.clip(value(x), lo, hi)
    xv, xi = _operand(x, tape)
    out = np.clip(xv, lo, hi)
    inside = (xv >= lo) & (xv <= hi)

    def bwd(g):
        return (g * inside,)

    return tape.push(out, (xi,), bwd)


# ---------------------------------------------------------------------------
# Reductions and linear algebra
# ---------------------------------------------------------------------------


def asum(x):
    """Sum of all entries, as a scalar."""
    tape = _tape_of(x)
    if tape is None:
        return np.sum(value(x))
    xv, xi = _operand(x, tape)
    out = np.sum(xv)

    def bwd(g):
        return (np.full(np.shape(xv), g),)

    return tape.push(out, (xi,), bwd)


def mean(x):
    n = np.size(value(x))
    return mul(asum(x), 1.0 / n)


def matmul(a, b):
    """Matrix product; either operand may also be a 1-D vector, as with ``@``."""
    tape = _tape_of(a, b)
    if tape is None:
        return value(a) @ value(b)
    av, ai = _operand(a, tape)
    bv, bi = _operand(b, tape)
    out = av @ bv

    def bwd(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = np.atleast_2d(g)
        if av.ndim == 1 and bv.ndim == 1:      # inner product, g scalar
            return g * bv, g * av
        if bv.ndim == 1:                        # (m,k)@(k,) -> (m,)
            g2 = np.asarray(g).reshape(-1, 1)
        elif av.ndim == 1:                      # (k,)@(k,n) -> (n,)
            g2 = np.asarray(g).reshape(1, -1)
        ga = g2 @ b2.T if ai != _CONST else None
        gb = a2.T @ g2 if bi != _CONST else None
        if ga is not None and av.ndim == 1:
            ga = ga.ravel()
        if gb is not None and bv.ndim == 1:
            gb = gb.ravel()
        return ga, gb

    return tape.push(out, (ai, bi), bwd)


def reshape(x, shape):
    tape = _tape_of(x)
    if tape is None:
        return np.reshape(value(x), shape)
    xv, xi = _operand(x, tape)

    def bwd(g):
        return (np.reshape(g, xv.shape),)

    return tape.push(np.reshape(xv, shape), (xi,), bwd)


def transpose(x):
    tape = _tape_of(x)
    if tape is None:
        return value(x).T
    xv, xi = _operand(x, tape)

    def bwd(g):
        return (g.T,)

    return tape.push(xv.T, (xi,), bwd)


def add_bias(x, b):
    """Add a bias row vector to every row of a matrix."""
    tape = _tape_of(x, b)
    if tape is None:
        return value(x) + value(b)
    xv, xi = _operand(x, tape)
    bv, bi = _operand(b, tape)
    out = xv + bv

    def bwd(g):
        gb = g.sum(axis=0) if np.ndim(xv) == 2 else g
        return g, gb

    return tape.push(out, (xi, bi), bwd)


def concat_rows(parts: Sequence):
    """Concatenate matrices along axis 0 (mixed constants and Vars allowed)."""
    tape = _tape_of(*parts)
    vals = [value(p) for p in parts]
    if tape is None:
        return np.concatenate(vals, axis=0)
    idxs = tuple(_operand(p, tape)[1] for p in parts)
    sizes = [v.shape[0] for v in vals]
    out = np.concatenate(vals, axis=0)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return tape.push(out, idxs, bwd)


def pack(scalars: Sequence):
    """Stack scalars into a 1-D vector."""
    tape = _tape_of(*scalars)
    vals = [np.float64(value(s)) for s in scalars]
    if tape is None:
        return np.array(vals)
    idxs = tuple(_operand(s, tape)[1] for s in scalars)
    out = np.array(vals)

    def bwd(g):
        return tuple(g[i] for i in range(len(vals)))

    return tape.push(out, idxs, bwd)


def row_softmax(x):
    """Numerically stable softmax along the last axis of a 2-D array."""
    tape = _tape_of(x)
    if tape is None:
        return _softmax_rows(value(x))
    xv, xi = _operand(x, tape)
    out = _softmax_rows(xv)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return tape.push(out, (xi,), bwd)


def _softmax_rows(x: Array) -> Array:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def logsumexp(x):
    """log(sum(exp(x))) of a 1-D vector, stable for large magnitudes."""
    tape = _tape_of(x)
    if tape is None:
        return _logsumexp(value(x))
    xv, xi = _operand(x, tape)
    out = _logsumexp(xv)
    soft = np.exp(xv - out)

    def bwd(g):
        return (g * soft,)

    return tape.push(out, (xi,), bwd)


def _logsumexp(x: Array):
    m = np.max(x)
    return m + np.log(np.sum(np.exp(x - m)))


# ---------------------------------------------------------------------------
# Parameter access
# ---------------------------------------------------------------------------


class TapeReader:
    """Hands out parameter segments as tape leaves.

    ``segment`` returns a recorded (differentiable) view; ``raw`` returns the
    plain array, and ``detached`` the underlying :class:`Params`, for code paths
    that must evaluate without gradient tracking.
    """

    def __init__(self, tape: Tape, params: Params) -> None:
        self.tape = tape
        self.params = params
        self.layout = params.layout
        self._flat = tape.leaf(params.values)
        self._cache: dict[str, Var] = {}

    def segment(self, name: str) -> Var:
        cached = self._cache.get(name)
        if cached is not None:
            return cached
        offset, shape = self.layout.segments[name]
        size = int(np.prod(shape))
        val = self.params.values[offset:offset + size].reshape(shape)
        flat_idx = self._flat.idx
        total = self.layout.total

        def bwd(g):
            out = np.zeros(total)
            out[offset:offset + size] = np.asarray(g).ravel()
            return (out,)

        var = self.tape.push(val, (flat_idx,), bwd)
        self._cache[name] = var
        return var

    def raw(self, name: str) -> Array:
        return self.params.segment(name)

    def detached(self) -> Params:
        return self.params

    @property
    def flat_index(self) -> int:
        return self._flat.idx


def grad(params: Params, f) -> tuple[float, GradVector]:
    """Value and exact reverse-mode gradient of a scalar function of the parameters.

    ``f`` receives a reader exposing ``segment(name)``/``raw(name)``/``layout``;
    :class:`Params` itself satisfies the same protocol for value-only calls.
    Raises :class:`NumericalError` if the value or any gradient entry is
    non-finite, naming the offending layout segments.
    """
    tape = Tape()
    reader = TapeReader(tape, params)
    out = f(reader)
    if not isinstance(out, Var):
        # f ignored the parameters (constant function): zero gradient.
        val = float(value(out))
        if not np.isfinite(val):
            raise NumericalError("loss value is non-finite")
        return val, GradVector(np.zeros(params.layout.total))
    val = float(out.value)
    if not np.isfinite(val):
        raise NumericalError("loss value is non-finite")
    adjoints = tape.backward(out)
    g = adjoints[reader.flat_index]
    if g is None:
        g = np.zeros(params.layout.total)
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        bad = ~np.isfinite(g)
        names = [n for n, (off, shape) in params.layout.segments.items()
                 if bad[off:off + int(np.prod(shape))].any()]
        raise NumericalError(f"non-finite gradient entries in segments: {names}")
    return val, GradVector(g)


def fd_grad(params: Params, f, h: float = 1e-5) -> GradVector:
    """Central finite-difference gradient, entry i = (f(p+h·e_i) − f(p−h·e_i)) / 2h."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    base = params.values
    out = np.empty(base.size)
    work = base.copy()
    for i in range(base.size):
        orig = work[i]
        work[i] = orig + h
        fp = float(value(f(Params(work, params.layout))))
        work[i] = orig - h
        fm = float(value(f(Params(work, params.layout))))
        work[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return GradVector(out)
