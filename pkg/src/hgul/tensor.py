"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires gradients.  Outside a tape every op is a plain numpy
computation, which is what evaluation passes use.

    >>> x = Tensor([[1.0, -2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(relu(x))
    >>> tape.backward(loss)
    >>> x.grad
    array([[1., 0.]])
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

DEBUG = bool(os.environ.get("HGUL_DEBUG"))

_active_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor must be at most 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so inputs always precede the
    operations consuming them; :meth:`backward` walks them in exact reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every recorded tensor."""
        if seed is None:
            if loss.values.size != 1:
                raise ValueError("backward() without a seed needs a scalar loss")
            seed = np.ones_like(loss.values)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            _accumulate(rec.output, g)
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves (parameters, inputs)
        leaves = {}
        for rec in self.records:
            for t in rec.inputs:
                leaves[id(t)] = t
        leaves[id(loss)] = loss
        for key, g in grads.items():
            t = leaves.get(key)
            if t is not None:
                _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def recording() -> bool:
    return bool(_active_tapes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(values: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``values`` as the output of a custom op.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    if DEBUG and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values produced by forward op")
    needs = _active_tapes and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out.requires_grad = bool(needs)
    if needs:
        _active_tapes[-1].records.append(_Record(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return make_op(av @ bv, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.values.T.copy(), (a,), lambda g: (g.T,))


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Hadamard product with row/column-vector broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values

    def backward(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return make_op(av * bv, (a, b), backward)


hadamard = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv

    def backward(g):
        return (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_op(a.values * c, (a,), lambda g: (g * c,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.values)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.values > 0
    return make_op(np.where(pos, a.values, 0.0), (a,), lambda g: (g * pos,))


def clamp_min(a, floor: float = 0.0) -> Tensor:
    a = as_tensor(a)
    keep = a.values > floor
    return make_op(np.where(keep, a.values, floor), (a,), lambda g: (g * keep,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return make_op(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.values)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return make_op(av**p, (a,), lambda g: (g * p * av ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return make_op(av * av, (a,), lambda g: (2.0 * g * av,))


def straight_through(soft, hard: np.ndarray) -> Tensor:
    """Forward ``hard``; backward passes the gradient to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64).reshape(soft.shape)
    return make_op(hard.copy(), (soft,), lambda g: (g,))


# -- reductions and reshaping ---------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return make_op(np.array([[a.values.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def sum_rows(a) -> Tensor:
    """Sum along columns, one value per row (n x 1)."""
    a = as_tensor(a)
    shape = a.shape
    return make_op(a.values.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_cols(a) -> Tensor:
    """Sum along rows, one value per column (1 x d)."""
    a = as_tensor(a)
    shape = a.shape
    return make_op(a.values.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_cols(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_cols(a), 1.0 / a.shape[0])


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, widths[i] : widths[i + 1]] for i in range(len(parts)))

    return make_op(np.concatenate([p.values for p in parts], axis=1), parts, backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[heights[i] : heights[i + 1]] for i in range(len(parts)))

    return make_op(np.concatenate([p.values for p in parts], axis=0), parts, backward)


def take_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_op(a.values[index], (a,), backward)


def gather(a, rows, cols) -> Tensor:
    """Entries ``a[rows[i], cols[i]]`` as an m x 1 column."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return make_op(a.values[rows, cols].reshape(-1, 1), (a,), backward)


def scatter(w, rows, cols, shape: tuple[int, int]) -> Tensor:
    """Dense ``shape`` matrix with ``w[i]`` added at ``(rows[i], cols[i])``."""
    w = as_tensor(w)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros(shape)
    np.add.at(out, (rows, cols), w.values.reshape(-1))
    wshape = w.shape
    return make_op(out, (w,), lambda g: (g[rows, cols].reshape(wshape),))


# -- probabilistic heads --------------------------------------------------


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_op(out, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return make_op(out, (a,), backward)


def cross_entropy(logits, labels, mask) -> Tensor:
    """Mean negative log-likelihood over the rows selected by ``mask``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise ValueError("cross_entropy: mask selects no nodes")
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
    logp = log_softmax_rows(logits)
    picked = gather(logp, idx, labels[idx])
    return scale(sum_all(picked), -1.0 / idx.size)


# -- gradient checking ----------------------------------------------------


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    ``f`` must be deterministic; freeze any sampling before calling.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    tape.backward(out)
    analytic = np.zeros_like(x.values) if x.grad is None else x.grad.copy()
    x.requires_grad = was
    x.grad = None

    numeric = np.zeros_like(x.values)
    flat = x.values.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        down = f(x).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
