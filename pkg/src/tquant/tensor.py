"""Dense float tensors with a reverse-mode gradient tape.

Everything else in this package computes on :class:`Tensor` values: thin
wrappers around contiguous numpy arrays (float32 by default) plus an
optional recording tape for reverse-mode differentiation.  Reductions and
transcendental ops accumulate in float64 before casting back to the tensor
dtype, which keeps forward results stable enough to compare bit-for-bit
against scalar reference implementations in the tests.

Tensors are immutable values once produced; ops are pure functions.  A
:class:`GradTape` is confined to a single thread: while active it records
every primitive whose inputs are tracked, and ``gradients(loss)`` replays
the record in reverse order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-12

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operands have incompatible or unsupported shapes."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""


class Tensor:
    """An immutable dense array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            # float64 passes through so oracle tests can run an extended-
            # precision twin of the float32 production path
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Arithmetic sugar; the real work lives in the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division is not a primitive; use mul + reciprocal data")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...],
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Gradients:
    """Gradient per tracked tensor; untouched tensors read as zero."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def wrt(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self.wrt(t)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of primitive ops, replayed backward for gradients."""

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, entry: _TapeEntry) -> None:
        self._entries.append(entry)

    def gradients(self, loss: Tensor) -> Gradients:
        """Accumulated gradient of a scalar loss for every tracked tensor.

        Entries were appended in execution order, so iterating them in
        reverse visits the graph in reverse topological order.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self._entries):
            g_out = grads.get(id(entry.output))
            if g_out is None:
                continue
            in_grads = entry.backward(g_out)
            for inp, g in zip(entry.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                g = np.asarray(g, dtype=inp.data.dtype)
                prev = grads.get(id(inp))
                if prev is None:
                    grads[id(inp)] = g.copy() if g.base is not None else g
                    tensors[id(inp)] = inp
                else:
                    grads[id(inp)] = prev + g
        return Gradients(grads, tensors)


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
          name: str | None = None) -> Tensor:
    tracked = any(i.requires_grad for i in inputs)
    out = Tensor(out_data, requires_grad=tracked, name=name)
    tape = _active_tape()
    if tape is not None and tracked:
        tape._record(_TapeEntry(out, inputs, backward))
    return out


def custom_op(inputs: Sequence[Tensor], out_data: np.ndarray,
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
              name: str | None = None) -> Tensor:
    """Register an externally-computed primitive on the active tape.

    Used by the quantizers to splice straight-through gradients into the
    graph without the tensor module knowing about quantization.
    """
    return _emit(np.asarray(out_data), tuple(inputs), backward, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _emit(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def backward(g):
        return (g * a.data.dtype.type(c),)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# matmul and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    # float64 accumulation, rounded once to the output dtype
    out64 = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64))
    out = out64.astype(a.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, np.swapaxes(b.data, -1, -2).astype(np.float64))
        gb = np.matmul(np.swapaxes(a.data, -1, -2).astype(np.float64), g64)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("transpose_last2 needs at least 2 dims")
    out = np.swapaxes(a.data, -1, -2).copy()

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _emit(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = tuple(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _emit(out, ts, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _emit(out, (a,), backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError(f"ids out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit(out, (table,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)

    def backward(g):
        return (np.full_like(a.data, g),)

    return _emit(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)

    def backward(g):
        return (np.full_like(a.data, g / n),)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    x64 = x.data.astype(np.float64)
    x64 = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(x64)
    y64 = e / e.sum(axis=-1, keepdims=True)
    y = y64.astype(x.data.dtype)

    def backward(g):
        s = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - s),)

    return _emit(y, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    x64 = x.data.astype(np.float64)
    m = x64.max(axis=-1, keepdims=True)
    shifted = x64 - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = (shifted - lse).astype(x.data.dtype)
    sm = np.exp(shifted - lse).astype(x.data.dtype)

    def backward(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x) with the Gaussian CDF."""
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x64 * _INV_SQRT2))
    out = (x64 * cdf).astype(x.data.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT2PI
        return ((g * (cdf + x64 * pdf)).astype(x.data.dtype),)

    return _emit(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row zero mean / unit variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out = (xhat * gain.data + bias.data).astype(x.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        dgain = (g64 * xhat).sum(axis=lead).astype(gain.data.dtype)
        dbias = g64.sum(axis=lead).astype(bias.data.dtype)
        h = g64 * gain.data.astype(np.float64)
        hm = h.mean(axis=-1, keepdims=True)
        hxm = (h * xhat).mean(axis=-1, keepdims=True)
        dx = (inv * (h - hm - xhat * hxm)).astype(x.data.dtype)
        return dx, dgain, dbias

    return _emit(out, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= p)
    factor = x.data.dtype.type(1.0 / (1.0 - p))
    m = keep.astype(x.data.dtype) * factor
    out = x.data * m

    def backward(g):
        return (g * m,)

    return _emit(out, (x,), backward)
