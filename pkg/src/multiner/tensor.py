"""Small define-by-run reverse-mode autodiff engine on top of numpy.

Only the operations the Multi-NER model needs are provided.  Every op
computes its result eagerly and, when any input requires a gradient,
attaches a :class:`Record` to the output.  ``backward`` collects the
records reachable from a scalar loss into a :class:`Tape` ordered by
execution index and replays their adjoints in exact reverse order.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

_counter = itertools.count()
_grad_enabled = True

# Test hook for fault injection: name of an op whose input adjoint gets negated.
_FAULT_NEGATE: Optional[str] = None


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class DeterminismError(RuntimeError):
    pass


@contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def inject_fault(op_name: Optional[str]):
    """Negate the first-input adjoint of ``op_name`` while active (testing only)."""
    global _FAULT_NEGATE
    prev, _FAULT_NEGATE = _FAULT_NEGATE, op_name
    try:
        yield
    finally:
        _FAULT_NEGATE = prev


class Record:
    __slots__ = ("index", "op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.index = next(_counter)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_record", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._record: Optional[Record] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def backward(self):
        backward(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    t = Tensor(out)
    if _grad_enabled and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t._record = Record(op, inputs, backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # shared 2-D weight: one GEMM over all leading positions
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(out, "matmul", (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(out, "reshape", (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(out, "transpose", (x,), bw)


def _is_fancy(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in key)


def _scatter_add(z: np.ndarray, key, g: np.ndarray) -> None:
    """z[key] += g with repeated indices accumulating.

    Fast path for tuples of integer arrays addressing leading axes (gathers
    of rows): sort the flattened row ids and sum runs with reduceat.
    """
    keys = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, np.ndarray) and k.dtype.kind in "iu" for k in keys):
        np.add.at(z, key, g)
        return
    lead = z.shape[:len(keys)]
    flat = np.ravel_multi_index(np.broadcast_arrays(*keys), lead).ravel()
    if flat.size == 0:
        return
    rows = g.reshape(flat.size, -1)
    order = np.argsort(flat, kind="stable")
    fs = flat[order]
    uniq, first = np.unique(fs, return_index=True)
    sums = np.add.reduceat(rows[order], first, axis=0)
    zf = z.reshape(int(np.prod(lead)), -1)
    zf[uniq] += sums


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    out = x.data[key]
    fancy = _is_fancy(key)

    def bw(g):
        z = np.zeros_like(x.data)
        if fancy:
            _scatter_add(z, key, g)
        else:
            z[key] = g
        return (z,)

    return _make(out, "index", (x,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    return index(weight, np.asarray(ids))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, "concat", xs, bw)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), bw)


# ---------------------------------------------------------------------------
# neural-net ops
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``.  ``mask`` (broadcastable bool, True = keep)
    gives masked entries exactly zero probability and zero gradient."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"invalid axis {axis} for shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, "gelu", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, "layer_norm", (x, gain, bias), bw)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * keep

    def bw(g):
        return (g * keep,)

    return _make(out, "dropout", (x,), bw)


def cross_entropy(logits: Tensor, target: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Masked mean of -log softmax(logits)[target] over positions.

    ``logits`` has shape (..., C); ``target`` and ``mask`` have shape (...).
    Returns 0 when the mask is all off.
    """
    target = np.asarray(target)
    n_cls = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"target shape {target.shape} vs logits {logits.shape}")
    if mask is None:
        mask = np.ones(target.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if np.any((target[mask] < 0) | (target[mask] >= n_cls)):
        raise DomainError(f"target class outside [0, {n_cls})")
    tgt = np.where(mask, target, 0).astype(np.intp)
    count = int(mask.sum())

    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=-1, keepdims=True)
    logp = z - zmax - np.log(se)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    w = mask.astype(z.dtype)
    total = -(picked * w).sum()
    out = np.asarray(total / count if count else 0.0 * total, dtype=z.dtype)

    def bw(g):
        if count == 0:
            return (np.zeros_like(z),)
        p = ez / se
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w[..., None] * (g / count)),)

    return _make(out, "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Records reachable from one loss, in execution order."""

    records: List[Record] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: Dict[int, Record] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            r = t._record
            if r is None or id(r) in seen:
                continue
            seen[id(r)] = r
            stack.extend(r.inputs)
        return cls(sorted(seen.values(), key=lambda r: r.index))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf
    tensor with ``requires_grad``.  A tape can be replayed only once."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = Tape.from_loss(loss)
    if any(r.consumed for r in tape.records):
        raise ContractError("tape already consumed; rerun the forward pass")

    # adjoints of intermediate tensors are keyed by the record that produced them
    grads: Dict[int, np.ndarray] = {id(loss._record): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        rec.consumed = True
        out_grad = grads.pop(id(rec), None)
        if out_grad is None:
            continue
        in_grads = rec.backward_fn(out_grad)
        if _FAULT_NEGATE == rec.op:
            in_grads = (-in_grads[0],) + tuple(in_grads[1:])
        for inp, gi in zip(rec.inputs, in_grads):
            if not inp.requires_grad:
                continue
            if inp._record is not None:
                key = id(inp._record)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
