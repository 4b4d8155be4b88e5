"""Reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run: every primitive op records a node on a global tape while
recording is enabled; ``backward`` walks the tape once in reverse execution
order and then clears it. Arrays are float64 by default (float32 via
``set_default_dtype``). Any op that produces a NaN/Inf raises
``NumericsError`` immediately; that check can be disabled for hot loops.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np


class NumericsError(ArithmeticError):
    """A forward op or gradient produced NaN/Inf."""


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")
    return data


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of executed primitive ops (execution order == topological order)."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()
_RECORDING = True


def active_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    _TAPE.clear()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference rollouts, oracles)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class Array:
    """Dense array node. ``data`` is a numpy array of the active float dtype."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on array of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Array":
        return Array(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Array):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return asum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return amean(self, axis=axis, keepdims=keepdims)


def _as_array(x) -> Array:
    if isinstance(x, Array):
        return x
    return Array(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _record(out: Array, inputs: tuple[Array, ...], vjp) -> Array:
    if _RECORDING and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _TAPE.nodes.append(_Node(inputs, out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    out = Array(_checked(a.data + b.data, "add"))

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    out = Array(_checked(a.data - b.data, "sub"))

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    out = Array(_checked(a.data * b.data, "mul"))

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), vjp)


def power(a, p) -> Array:
    a = _as_array(a)
    p = float(p)
    out = Array(_checked(a.data ** p, "power"))

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), vjp)


def matmul(a, b) -> Array:
    a, b = _as_array(a), _as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Array(_checked(a.data @ b.data, "matmul"))

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp)


def transpose(a) -> Array:
    a = _as_array(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-d operand, got {a.shape}")
    out = Array(a.data.T.copy())

    def vjp(g):
        return (g.T,)

    return _record(out, (a,), vjp)


def concat(arrays, axis: int = 0) -> Array:
    arrays = tuple(_as_array(a) for a in arrays)
    if not arrays:
        raise ShapeError("concat of empty sequence")
    out = Array(np.concatenate([a.data for a in arrays], axis=axis))
    sizes = [a.shape[axis] for a in arrays]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(arrays)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record(out, arrays, vjp)


def narrow(a, axis: int, start: int, length: int) -> Array:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = _as_array(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    out = Array(a.data[tuple(sl)].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (a,), vjp)


def gather_rows(a, indices) -> Array:
    """Row lookup (embedding gather): out[i] = a[indices[i]]."""
    a = _as_array(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-d index sequence")
    if a.ndim != 2:
        raise ShapeError("gather_rows expects a 2-d table")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = Array(a.data[idx].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (a,), vjp)


def asum(a, axis=None, keepdims: bool = False) -> Array:
    a = _as_array(a)
    out = Array(_checked(a.data.sum(axis=axis, keepdims=keepdims), "sum"))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), vjp)


def amean(a, axis=None, keepdims: bool = False) -> Array:
    a = _as_array(a)
    count = a.size if axis is None else a.shape[axis]
    out = Array(_checked(a.data.mean(axis=axis, keepdims=keepdims), "mean"))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy() / count,)

    return _record(out, (a,), vjp)


def relu(a) -> Array:
    a = _as_array(a)
    out = Array(np.maximum(a.data, 0.0))

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), vjp)


def tanh(a) -> Array:
    a = _as_array(a)
    y = np.tanh(a.data)
    out = Array(y)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return _record(out, (a,), vjp)


def sigmoid(a) -> Array:
    a = _as_array(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Array(y)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), vjp)


def exp(a) -> Array:
    a = _as_array(a)
    y = _checked(np.exp(a.data), "exp")
    out = Array(y)

    def vjp(g):
        return (g * y,)

    return _record(out, (a,), vjp)


def log(a) -> Array:
    a = _as_array(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    out = Array(_checked(y, "log"))

    def vjp(g):
        return (g / a.data,)

    return _record(out, (a,), vjp)


def softplus(a) -> Array:
    a = _as_array(a)
    out = Array(np.logaddexp(0.0, a.data))
    x = a.data

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _record(out, (a,), vjp)


def softmax(a, axis: int = -1) -> Array:
    """Max-subtracted softmax along ``axis``; each slice sums to 1."""
    a = _as_array(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Array(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Array:
    a = _as_array(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Array(_checked(y, "log_softmax"))
    sm = np.exp(y)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Array) -> None:
    """Populate ``.grad`` on every reachable ``requires_grad`` array, then clear the tape.

    The tape is consumed: a fresh forward pass is needed before the next backward.
    """
    if not isinstance(loss, Array) or loss.size != 1:
        raise ShapeError("backward requires a scalar Array loss")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE.nodes):
        og = node.output.grad
        if og is None:
            continue
        grads = node.vjp(og)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = g.astype(_DEFAULT_DTYPE, copy=True)
            else:
                inp.grad = inp.grad + g
    _TAPE.clear()


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

class RngStream:
    """PCG64-backed stream: identical seed gives identical draws on every platform.

    ``derive`` forks an independent child stream from a string tag, so
    sub-generators stay stable when unrelated draw counts change.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, tag: str) -> "RngStream":
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return RngStream(int.from_bytes(digest[:8], "little"))

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def shuffle(self, seq) -> None:
        self._gen.shuffle(seq)

    def permutation(self, n):
        return self._gen.permutation(n)
