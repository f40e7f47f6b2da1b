"""Dense float64 tensors with a reverse-mode tape and an Adam optimizer.

Every primitive checks its output for NaN/Inf and records itself on the
active tape (if any).  Gradients are replayed in reverse tape order, which
makes backward deterministic: two runs over the same tape are bitwise equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_NORM_GUARD = 1e-12


class NumericFault(RuntimeError):
    """A primitive produced a non-finite value (or was fed one)."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite output of primitive '{name}'")


@dataclass
class Record:
    op: str
    inputs: tuple
    out: "Tensor"
    bwd: Callable


class Tape:
    """Ordered single-writer record of primitive applications."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False


_tape_stack: list[Tape] = []


def _push_tape(t: Tape) -> None:
    _tape_stack.append(t)


def _pop_tape(t: Tape) -> None:
    assert _tape_stack and _tape_stack[-1] is t
    _tape_stack.pop()


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """Row-major float64 array.  Immutable unless it is an optimizer leaf."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; all routed through the recorded primitives below
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x) -> Tensor:
    """A tensor that participates in ops but carries no trainable meaning."""
    return Tensor(x)


def _emit(op: str, out_data: np.ndarray, inputs: tuple, bwd: Callable) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.records.append(Record(op, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------------
# primitives
# ------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _emit("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _emit("matmul", out, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def vlin(w: Tensor, v: Tensor) -> Tensor:
    """Channel-mixing linear map on stacks of 3-vectors: (c',c) x (n,c,3) -> (n,c',3)."""
    if w.data.ndim != 2 or v.data.ndim != 3 or w.data.shape[1] != v.data.shape[1]:
        raise ShapeError(f"vlin: {w.data.shape} on {v.data.shape}")
    out = np.einsum("ij,njk->nik", w.data, v.data)
    return _emit("vlin", out, (w, v),
                 lambda g: (np.einsum("nik,njk->ij", g, v.data),
                            np.einsum("ij,nik->njk", w.data, g)))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(parts), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, idx) -> Tensor:
    """Gather rows along axis 0 (idx: int array)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("take", out, (a,), bwd)


def put_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of base with base[idx] replaced by rows (axis 0)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = base.data.copy()
    out[idx] = rows.data

    def bwd(g):
        gb = g.copy()
        gb[idx] = 0.0
        return (gb, g[idx])

    return _emit("put_rows", out, (base, rows), bwd)


def segment_sum(a: Tensor, idx, num: int) -> Tensor:
    """out[k] = sum of a rows whose idx == k; shape (num, *a.shape[1:])."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((num,) + a.data.shape[1:])
    np.add.at(out, idx, a.data)
    return _emit("segment_sum", out, (a,), lambda g: (g[idx],))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _emit("sum", out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * const(1.0 / n)


def rownorm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; gradient guarded to 0 at the origin."""
    out = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def bwd(g):
        denom = np.where(out < _NORM_GUARD, 1.0, out)
        scale = np.where(out < _NORM_GUARD, 0.0, g / denom)
        return (scale[..., None] * a.data,)

    return _emit("rownorm", out, (a,), bwd)


def inner(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis."""
    return tsum(mul(a, b), axis=-1)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  Masked-out entries (mask False) are exactly 0."""
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: a row has every entry masked")
        shifted = np.where(mask, x, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(x - m), 0.0)
    else:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit("softmax", out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _emit("softplus", out, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Data-dependent select; cond is a plain boolean array (not differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _emit("where", out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.data.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.data.shape)))


# ------------------------------------------------------------------
# backward
# ------------------------------------------------------------------

class Gradients:
    """Map from tensor to its gradient array; zeros for unreachable leaves."""

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def get(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-replay the tape from `loss`, returning gradients for every tensor."""
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not any(rec.out is loss for rec in tape.records):
        raise ValueError("backward: loss was not produced on this tape")
    table: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for rec in reversed(tape.records):
        g = table.get(id(rec.out))
        if g is None:
            continue
        grads = rec.bwd(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None:
                continue
            prev = table.get(id(inp))
            table[id(inp)] = gi if prev is None else prev + gi
    return Gradients(table)


# ------------------------------------------------------------------
# finite-difference oracle
# ------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    tape = Tape()
    with tape:
        y = f(x)
    g_ad = backward(tape, y).get(x).ravel()

    flat = x.data.ravel().copy()
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        for sgn, slot in ((1.0, 0), (-1.0, 1)):
            pert = flat.copy()
            pert[i] += sgn * eps
            val = f(Tensor(pert.reshape(x.data.shape))).data
            if not np.isfinite(val):
                raise NumericFault("finite_diff_check: non-finite f at perturbed point")
            if slot == 0:
                hi = float(val)
            else:
                lo = float(val)
        g_fd[i] = (hi - lo) / (2.0 * eps)
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-8)))


# ------------------------------------------------------------------
# Adam
# ------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One in-place Adam update over a named parameter set."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"adam_step: non-finite gradient for parameter '{name}'")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return state
