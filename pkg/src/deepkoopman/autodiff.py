"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive accepts plain arrays or :class:`Var` nodes. When none of the
arguments is a ``Var`` the primitive just returns the numpy result, so model
code written against these functions doubles as the inference path.

Arrays may carry leading batch dimensions; ``matmul`` and ``solve_spd`` act
on the last two axes and gradients are summed back over broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .numerics import NumericalError


class Tape:
    """Append-only record of the primitives evaluated in one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._consumed = False

    def var(self, value, name: str | None = None) -> "Var":
        """Register a leaf (parameter or input) on the tape."""
        return Var(self, np.array(value, dtype=float), (), None, name=name)

    def backward(self, loss: "Var") -> None:
        """Populate ``.grad`` on every node reachable from ``loss``."""
        if self._consumed:
            raise RuntimeError("backward already called on this tape")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        self._consumed = True
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.backward_fn is None or not node.parents:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if isinstance(parent, Var) and g is not None:
                    parent.grad += _unbroadcast(g, parent.value.shape)


class Var:
    __array_priority__ = 100

    def __init__(self, tape: Tape, value: np.ndarray, parents: tuple, backward_fn: Callable | None,
                 name: str | None = None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad: np.ndarray | None = None
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(args, out: np.ndarray, backward_fn):
    tape = _tape_of(args)
    if tape is None:
        return out
    return Var(tape, out, tuple(args), backward_fn)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# -- primitives ---------------------------------------------------------------

def add(a, b):
    return _record((a, b), value(a) + value(b), lambda g: (g, g))


def sub(a, b):
    return _record((a, b), value(a) - value(b), lambda g: (g, -g))


def mul(a, b):
    va, vb = value(a), value(b)
    return _record((a, b), va * vb, lambda g: (g * vb, g * va))


def matmul(a, b):
    va, vb = value(a), value(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def back(g):
        ga = g @ _swap(vb)
        gb = _swap(va) @ g
        return ga, gb

    return _record((a, b), va @ vb, back)


def transpose(a):
    return _record((a,), _swap(value(a)), lambda g: (_swap(g),))


def relu(a):
    va = value(a)
    mask = va > 0.0  # derivative at exactly 0 is taken as 0
    return _record((a,), np.where(mask, va, 0.0), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(value(a))
    return _record((a,), out, lambda g: (g * (1.0 - out * out),))


def sum(a):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    return _record((a,), np.sum(va), lambda g: (np.broadcast_to(g, va.shape).copy(),))


def sumsq(a):
    """Sum of squared entries (squared Frobenius norm)."""
    va = value(a)
    return _record((a,), np.sum(va * va), lambda g: (2.0 * g * va,))


def getitem(a, key):
    va = value(a)

    def back(g):
        out = np.zeros_like(va)
        np.add.at(out, key, g)
        return (out,)

    return _record((a,), va[key], back)


def stack(items: Sequence, axis: int = 0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)

    def back(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(items)))

    return _record(tuple(items), out, back)


def concat(items: Sequence, axis: int = 0):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(tuple(items), out, back)


def reshape(a, shape):
    va = value(a)
    return _record((a,), va.reshape(shape), lambda g: (g.reshape(va.shape),))


def solve_spd(M, R):
    """Differentiable solve of ``M S = R`` for symmetric positive definite ``M``.

    Backward: ``grad_R = M^-1 G`` and ``grad_M = -(M^-1 G) S^T``, with the
    latter symmetrised because ``M`` is only ever a symmetric argument.
    """
    vM, vR = value(M), value(R)
    try:
        L = np.linalg.cholesky(vM)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("solve_spd: matrix is not symmetric positive definite") from exc
    Lt = _swap(L)

    def solve(B):
        return np.linalg.solve(Lt, np.linalg.solve(L, B))

    S = solve(vR)

    def back(g):
        gR = solve(g)
        gM = -gR @ _swap(S)
        return 0.5 * (gM + _swap(gM)), gR

    return _record((M, R), S, back)


def linear_solve_spd(M, R):
    """Alias of :func:`solve_spd`."""
    return solve_spd(M, R)
