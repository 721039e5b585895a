"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to :class:`Var` objects; the
adjoint pass walks the record backwards. The module-level functions accept
either plain arrays or ``Var`` and only touch the tape when at least one
argument is a ``Var``, so the same model code serves forward-only
evaluation (validation, inference) and differentiated evaluation with
bitwise-identical forward values.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit


class UnrecordedPrimitiveError(RuntimeError):
    """The tape holds an operation it cannot differentiate."""


class TapeMismatchError(ValueError):
    """Variables from different tapes were combined."""


class Primitive:
    """A differentiable operation.

    ``vjp(g, saved, *input_values)`` returns one adjoint per input, or
    ``None`` for inputs that do not need one.
    """

    def __init__(self, name: str, vjp: Optional[Callable] = None):
        self.name = name
        self.vjp = vjp

    def __repr__(self):
        return f"Primitive({self.name})"


class Tape:
    def __init__(self):
        self._values: list = []
        self._records: list = []  # (primitive, inputs, saved) or None for leaves

    def __len__(self):
        return len(self._values)

    def var(self, value) -> "Var":
        """Create a leaf variable."""
        return self._push(np.array(value, dtype=np.float64), None)

    def _push(self, value, record) -> "Var":
        self._values.append(value)
        self._records.append(record)
        return Var(self, value, len(self._values) - 1)

    def record(self, prim: Primitive, value, inputs: Sequence, saved=None) -> "Var":
        for x in inputs:
            if isinstance(x, Var) and x.tape is not self:
                raise TapeMismatchError(f"{prim.name}: operand recorded on a different tape")
        return self._push(value, (prim, tuple(inputs), saved))

    def gradient(self, output: "Var", wrt: Sequence["Var"] | "Var", seed=None):
        """Adjoints of ``output`` with respect to ``wrt``.

        ``seed`` is the output adjoint (defaults to one for a scalar output).
        Returns an array for a single ``Var`` and a list otherwise.
        """
        single = isinstance(wrt, Var)
        targets = [wrt] if single else list(wrt)
        for v in [output] + targets:
            if v.tape is not self:
                raise TapeMismatchError("variable belongs to a different tape")
        if seed is None:
            if output.value.size != 1:
                raise ValueError("seed required for non-scalar output")
            seed = np.ones_like(output.value)
        adj: list = [None] * (output.index + 1)
        adj[output.index] = np.asarray(seed, dtype=np.float64)
        for idx in range(output.index, -1, -1):
            g = adj[idx]
            rec = self._records[idx]
            if g is None or rec is None:
                continue
            prim, inputs, saved = rec
            if prim.vjp is None:
                raise UnrecordedPrimitiveError(f"no adjoint rule for primitive {prim.name!r}")
            values = [x.value if isinstance(x, Var) else x for x in inputs]
            grads = prim.vjp(g, saved, *values)
            for x, gx in zip(inputs, grads):
                if gx is None or not isinstance(x, Var):
                    continue
                gx = _unbroadcast(gx, x.value.shape)
                j = x.index
                adj[j] = gx if adj[j] is None else adj[j] + gx
        out = []
        for v in targets:
            g = adj[v.index] if v.index < len(adj) else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out[0] if single else out


def backprop(tape: Tape, output: "Var", wrt: "Var", output_adjoint=None) -> np.ndarray:
    """Gradient of ``output`` with respect to ``wrt`` (usually the flat parameter vector)."""
    return tape.gradient(output, wrt, seed=output_adjoint)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _tape_of(*args) -> Optional[Tape]:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeMismatchError("operands recorded on different tapes")
    return tape


def value_of(x):
    return x.value if isinstance(x, Var) else x


# -- primitives -------------------------------------------------------------

ADD = Primitive("add", lambda g, s, a, b: (g, g))
SUB = Primitive("sub", lambda g, s, a, b: (g, -g))
MUL = Primitive("mul", lambda g, s, a, b: (g * b, g * a))
DIV = Primitive("div", lambda g, s, a, b: (g / b, -g * a / (b * b)))
NEG = Primitive("neg", lambda g, s, a: (-g,))
TANH = Primitive("tanh", lambda g, out, a: (g * (1.0 - out * out),))
SIGMOID = Primitive("logistic", lambda g, out, a: (g * out * (1.0 - out),))
SQRT = Primitive("sqrt", lambda g, out, a: (g * 0.5 / out,))
RECIPROCAL = Primitive("reciprocal", lambda g, out, a: (-g * out * out,))
SQUARE = Primitive("square", lambda g, s, a: (2.0 * g * a,))


def _sum_vjp(g, saved, a):
    axis, keepdims = saved
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


SUM = Primitive("sum", _sum_vjp)


def _getitem_vjp(g, key, a):
    out = np.zeros_like(a)
    np.add.at(out, key, g)
    return (out,)


GETITEM = Primitive("getitem", _getitem_vjp)
RESHAPE = Primitive("reshape", lambda g, s, a: (np.reshape(g, a.shape),))


def _concat_vjp(g, saved, *parts):
    axis = saved
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


CONCAT = Primitive("concat", _concat_vjp)


def _affine_vjp(g, saved, x, W, b):
    # y = x @ W.T + b, x: (..., in), W: (out, in), b: (out,)
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return (g @ W, g2.T @ x2, g2.sum(axis=0))


AFFINE = Primitive("affine", _affine_vjp)


def _matvec_vjp(g, saved, A, v):
    # y_i = sum_j A_ij v_j over leading batch dims
    return (g[..., :, None] * v[..., None, :], np.einsum("...ij,...i->...j", A, g))


MATVEC = Primitive("matvec", _matvec_vjp)


def _binary(prim, fn, a, b):
    tape = _tape_of(a, b)
    out = fn(value_of(a), value_of(b))
    if tape is None:
        return out
    return tape.record(prim, out, (a, b))


def _unary(prim, fn, a, save_out=False):
    if not isinstance(a, Var):
        return fn(a)
    out = fn(a.value)
    return a.tape.record(prim, out, (a,), out if save_out else None)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "value", "index")
    __array_ufunc__ = None  # numpy functions must not silently bypass the tape

    def __init__(self, tape: Tape, value: np.ndarray, index: int):
        self.tape = tape
        self.value = value
        self.index = index

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return _binary(ADD, np.add, self, other)

    def __radd__(self, other):
        return _binary(ADD, np.add, other, self)

    def __sub__(self, other):
        return _binary(SUB, np.subtract, self, other)

    def __rsub__(self, other):
        return _binary(SUB, np.subtract, other, self)

    def __mul__(self, other):
        return _binary(MUL, np.multiply, self, other)

    def __rmul__(self, other):
        return _binary(MUL, np.multiply, other, self)

    def __truediv__(self, other):
        return _binary(DIV, np.divide, self, other)

    def __rtruediv__(self, other):
        return _binary(DIV, np.divide, other, self)

    def __neg__(self):
        return _unary(NEG, np.negative, self)

    def __getitem__(self, key):
        return self.tape.record(GETITEM, self.value[key], (self,), key)

    def reshape(self, *shape):
        return self.tape.record(RESHAPE, self.value.reshape(*shape), (self,))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


def tanh(x):
    return _unary(TANH, np.tanh, x, save_out=True)


def sigmoid(x):
    return _unary(SIGMOID, expit, x, save_out=True)


def sqrt(x):
    return _unary(SQRT, np.sqrt, x, save_out=True)


def reciprocal(x):
    return _unary(RECIPROCAL, np.reciprocal, x, save_out=True)


def square(x):
    return _unary(SQUARE, np.square, x)


def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    return x.tape.record(SUM, np.sum(x.value, axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


def concat(parts: Sequence, axis: int = -1):
    tape = _tape_of(*parts)
    vals = [np.asarray(value_of(p)) for p in parts]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    axis = axis % vals[0].ndim
    return tape.record(CONCAT, np.concatenate(vals, axis=axis), tuple(parts), axis)


def affine(x, W, b):
    """``x @ W.T + b`` for a weight matrix of shape ``(out, in)``."""
    tape = _tape_of(x, W, b)
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    out = xv @ Wv.T + bv
    if tape is None:
        return out
    return tape.record(AFFINE, out, (x, W, b))


def matvec(A, v):
    """Batched ``A @ v`` over the last two / last axes."""
    tape = _tape_of(A, v)
    out = np.einsum("...ij,...j->...i", value_of(A), value_of(v))
    if tape is None:
        return out
    return tape.record(MATVEC, out, (A, v))


def reshape(x, shape):
    return x.reshape(shape) if isinstance(x, Var) else np.reshape(x, shape)


# -- flow-field evaluation --------------------------------------------------


def _field_vjp(g, saved, x):
    du, dgrad, ddudt = saved
    g_u = g[..., 0:3]
    g_grad = g[..., 3:12].reshape(g.shape[:-1] + (3, 3))
    g_dudt = g[..., 12:15]
    gx = (
        np.einsum("...i,...ik->...k", g_u, du)
        + np.einsum("...ij,...ijk->...k", g_grad, dgrad)
        + np.einsum("...i,...ik->...k", g_dudt, ddudt)
    )
    return (gx,)


FIELD_SAMPLE = Primitive("field_sample", _field_vjp)


def field_sample(field, x, t: float):
    """Evaluate ``field`` at positions ``x`` and return ``(u, grad_u, du_dt_partial)``.

    With a ``Var`` position the three outputs are ``Var`` slices of one
    recorded evaluation whose adjoint uses the field's position jacobians.
    """
    s = field.sample(value_of(x), t)
    if not isinstance(x, Var):
        return s.u, s.grad_u, s.du_dt_partial
    lead = s.u.shape[:-1]
    packed = np.concatenate([s.u, s.grad_u.reshape(lead + (9,)), s.du_dt_partial], axis=-1)
    node = x.tape.record(FIELD_SAMPLE, packed, (x,), field.position_jacobians(x.value, t))
    u = node[..., 0:3]
    grad = node[..., 3:12].reshape(lead + (3, 3))
    dudt = node[..., 12:15]
    return u, grad, dudt
