"""Dense float64 tensors with a reverse-mode gradient tape.

Every op is a plain function over :class:`Tensor`. When a :class:`GradTape`
is active on the current thread and an input requires gradients, the op
appends a node holding its local backward rule; :meth:`GradTape.backward`
replays those nodes in reverse.

A :class:`FlopCounter` can be activated the same way to count arithmetic
operations, which the serving module uses to compare the cost of the full
and the cached scoring paths.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation's precondition does not hold."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block on the same
    thread are recorded.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("tapes").pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self.nodes.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(node) back to every reachable leaf.

        Returns a mapping from leaf tensor to its gradient and also stores
        the gradient on ``leaf.grad`` (overwriting any previous value).
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(out) for out, _, _ in self.nodes}
        leaves: dict[int, Tensor] = {}
        for out, inputs, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        result = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            result[leaf] = grads[key]
        return result


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


class FlopCounter:
    """Counts floating point operations of ops run inside the block."""

    def __init__(self):
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        _stack("counters").append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack("counters").pop()


def _stack(name: str) -> list:
    s = getattr(_local, name, None)
    if s is None:
        s = []
        setattr(_local, name, s)
    return s


def _count(n: int) -> None:
    for c in _stack("counters"):
        c.flops += int(n)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    tapes = _stack("tapes")
    needs = bool(tapes) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tapes[-1].record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    _count(out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    _count(out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    _count(out.size)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    _count(out.size)
    return _make(out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    _count(4 * out.size)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    _count(out.size)
    return _make(out, (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# reductions and shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    _count(x.size)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(k is None or k is Ellipsis or isinstance(k, (slice, int)) for k in parts)

    def rule(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (x,), rule)


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(parts), rule)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    out, start = [], 0
    ax = axis % x.ndim
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(start, start + n)
        out.append(index(x, tuple(sl)))
        start += n
    return out


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; the gradient touches only looked-up rows."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.shape[0])].flat[0]
        raise IndexError(f"index {int(bad)} out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return _make(out, (table,), rule)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)
    _count(2 * out.size * a.shape[-1])

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), rule)


def linear(x, W, b=None) -> Tensor:
    """``x @ W (+ b)`` over the last axis of ``x``; ``W`` is ``[in, out]``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    _count(2 * out.size * W.shape[0])
    if b is not None:
        out = out + b.data
        _count(out.size)
    out = out.reshape(*lead, W.shape[1])

    def rule(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return _make(out, inputs, rule)


def dot(a, b, axis: int = -1) -> Tensor:
    """Inner product along ``axis`` with broadcasting."""
    return sum(mul(a, b), axis=axis)


def softmax(scores, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    scores = as_tensor(scores)
    if scores.ndim == 0 or scores.shape[axis] == 0:
        raise ContractError("softmax over an empty axis")
    z = scores.data - scores.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _count(5 * out.size)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (scores,), rule)


def weighted_sum(weights, values) -> Tensor:
    """``sum_j weights[..., j] * values[..., j, :]``."""
    weights, values = as_tensor(weights), as_tensor(values)
    return reshape(
        matmul(reshape(weights, (*weights.shape[:-1], 1, weights.shape[-1])), values),
        (*weights.shape[:-1], values.shape[-1]),
    )


def matvec(mats, vecs) -> Tensor:
    """``sum_k mats[..., j, k] * vecs[..., k]`` over matching leading axes."""
    mats, vecs = as_tensor(mats), as_tensor(vecs)
    return reshape(matmul(mats, reshape(vecs, (*vecs.shape, 1))), mats.shape[:-1])


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    out = np.swapaxes(x.data, -1, -2)
    return _make(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))
