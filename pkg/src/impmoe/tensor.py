"""Dense tensors with a reverse-mode tape.

Only the operations the model needs are provided. Every differentiable op
records one tape entry holding its inputs, output and a closure over the
values saved for the backward rule. ``backward`` walks the tape in reverse,
visiting each entry once, and clears it afterwards.

Broadcasting follows a trailing-dimension rule only: a binary op accepts two
equal shapes, or one shape that is an exact suffix of the other (a scalar is
the empty suffix). Size-1 expansion is deliberately not supported.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = np.float32
_grad_enabled = True
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for newly created tensors."""
    global _default_dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _default_dtype = _DTYPES[bits]


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    prev = _default_dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if prev is np.float64 else 32)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording (evaluation, parameter init)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim and min(arr.shape) <= 0:
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable

    @property
    def input_ids(self) -> tuple:
        return tuple(id(t) for t in self.inputs)

    @property
    def output_id(self) -> int:
        return id(self.output)


@dataclass
class Tape:
    entries: list = field(default_factory=list)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


class ParamTree(dict):
    """Path -> Tensor mapping that always iterates in lexicographic order."""

    def __iter__(self):
        return iter(sorted(super().keys()))

    def keys(self):
        return list(self)

    def items(self):
        return [(k, self[k]) for k in self]

    def values(self):
        return [self[k] for k in self]

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.values()]))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: Sequence[Tensor], kind: str, backward) -> Tensor:
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    if needs:
        _tape.record(TapeEntry(kind, tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ValueError(f"shapes {a} and {b} are not broadcastable (trailing-dimension rule)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), "mul",
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)
    return _result(out, (a, b), "div", back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _result(np.log(ad), (a,), "log", lambda g: (g / ad,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _result(np.clip(ad, lo, hi), (a,), "clip", lambda g: (g * inside,))


def gelu(a) -> Tensor:
    """Exact GeLU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return _result(x * cdf, (a,), "gelu",
                   lambda g: (g * (cdf + x * pdf),))


# ---------------------------------------------------------------------------
# shape

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    return _result(a.data.transpose(axes), (a,), "transpose",
                   lambda g: (g.transpose(np.argsort(axes)),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), "sum",
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _norm_axis(axis, a.ndim)
    return _result(a.data.sum(axis=ax), (a,), "sum",
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[_norm_axis(axis, a.ndim)]
    return scale(sum(a, axis), 1.0 / n)


def mean_pool(x, axis: int = 1) -> Tensor:
    """Arithmetic mean along ``axis`` (the sequence axis by default)."""
    return mean(x, axis)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = ad.shape, bd.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {sa} @ {sb} "
                         f"({sa[-1]} != {sb[-2]})")
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ValueError(f"matmul batch dimensions differ: {sa[:-2]} vs {sb[:-2]}")
    if len(sa) == 2 and len(sb) > 2:
        raise ValueError(f"matmul: batched rhs needs a batched lhs, got {sa} @ {sb}")

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb
    return _result(ad @ bd, (a, b), "matmul", back)


# ---------------------------------------------------------------------------
# normalisation and probabilities

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)
    return _result(out, (x,), "softmax", back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (x,), "log_softmax",
                   lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    if _norm_axis(axis, xd.ndim) != xd.ndim - 1:
        raise ValueError("layer_norm only normalises the last axis")
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm gain/bias must have shape ({d},), "
                         f"got {gain.shape} and {bias.shape}")
    rd = 1.0 / d
    xc = xd - np.add.reduce(xd, axis=-1, keepdims=True) * rd
    inv = 1.0 / np.sqrt(np.add.reduce(xc * xc, axis=-1, keepdims=True) * rd + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.sum(axis=-1, keepdims=True) * rd
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) * rd)
        return dx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))
    return _result(xhat * gd + bias.data, (x, gain, bias), "layer_norm", back)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=ax, keepdims=True) + eps)
    y = xd / n
    return _result(y, (x,), "l2_normalize",
                   lambda g: ((g - y * (g * y).sum(axis=ax, keepdims=True)) / n,))


def sigmoid_cross_entropy(logits, targets) -> Tensor:
    """Elementwise ``max(x,0) - x*y + log1p(exp(-|x|))``."""
    logits = as_tensor(logits)
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise ValueError(f"targets shape {y.shape} != logits shape {x.shape}")
    out = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(out, (logits,), "sigmoid_xent", lambda g: (g * (sig - y),))


# ---------------------------------------------------------------------------
# indexing

def _check_indices(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n}): min {idx.min()}, max {idx.max()}")
    return idx


def gather_rows(x, indices) -> Tensor:
    """Select rows (first-axis entries) of ``x``; duplicates allowed."""
    x = as_tensor(x)
    idx = _check_indices(indices, x.shape[0])
    n = x.shape[0]
    return _result(x.data[idx], (x,), "gather_rows",
                   lambda g: (_scatter(g, idx, n),))


def _scatter(y: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + y.shape[1:], dtype=y.dtype)
    np.add.at(out, idx, y)
    return out


def scatter_add_rows(y, indices, num_rows: int) -> Tensor:
    """Transpose of ``gather_rows``: add each row of ``y`` into ``indices``."""
    y = as_tensor(y)
    idx = _check_indices(indices, num_rows)
    if idx.shape[0] != y.shape[0]:
        raise ValueError(f"{idx.shape[0]} indices for {y.shape[0]} rows")
    return _result(_scatter(y.data, idx, num_rows), (y,), "scatter_add_rows",
                   lambda g: (g[idx],))


def top_k(scores, k: int, axis: int = -1):
    """Largest ``k`` entries along ``axis`` in descending order.

    Ties go to the lower index. Returns ``(values, indices)``; the selection
    itself carries no gradient, values do.
    """
    scores = as_tensor(scores)
    ax = _norm_axis(axis, scores.ndim)
    n = scores.shape[ax]
    if not 1 <= k <= n:
        raise ValueError(f"top_k: k={k} out of range for axis extent {n}")
    order = np.argsort(-scores.data, axis=ax, kind="stable")
    idx = np.take(order, np.arange(k), axis=ax)
    vals = np.take_along_axis(scores.data, idx, axis=ax)
    shape = scores.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, idx, g, axis=ax)
        return (out,)
    return _result(vals, (scores,), "top_k", back), idx


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor, params: dict | None = None):
    """Back-propagate a scalar ``loss`` through the tape.

    Leaf tensors with ``requires_grad`` get their gradient added to ``.grad``.
    If ``params`` (a path -> Tensor mapping) is given, returns a
    path -> ndarray mapping with zeros for parameters the loss did not touch.
    The tape is cleared afterwards, so a second call without a new forward
    pass raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    entries = _tape.entries
    if not loss.requires_grad or not entries:
        raise RuntimeError("no recorded graph for this loss "
                           "(backward already called or forward ran without grad)")
    produced = {e.output_id for e in entries}
    if id(loss) not in produced:
        raise RuntimeError("loss was not produced on the current tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for entry in reversed(entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for t, gi in zip(entry.inputs, in_grads):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
    _tape.clear()
    if params is None:
        return None
    return {path: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for path, p in sorted(params.items())}


def zero_grad(params: dict) -> None:
    for p in params.values():
        p.grad = None
