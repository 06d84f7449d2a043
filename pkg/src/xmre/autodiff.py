"""Minimal reverse-mode autodiff over numpy arrays.

Just enough of a tape for the fusion core: matmul (2-D and batched 3-D),
broadcasting add/mul, reshape/transpose/concat/row-gather, masked softmax,
GELU and cross-entropy. Everything runs in float64; gradients are exact
analytic expressions, verified against central finite differences in the
test suite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from xmre.errors import ContractViolation

Array = np.ndarray


def _as_array(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = _as_array(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and propagate along the tape."""

        if self.data.size != 1:
            raise ContractViolation("backward() must start from a scalar")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Undo numpy broadcasting: sum gradient axes back down to ``shape``."""

    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def add(a: Tensor, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        _accumulate(a, _sum_to_shape(g, a.data.shape))
        _accumulate(b, _sum_to_shape(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        _accumulate(a, _sum_to_shape(g * b.data, a.data.shape))
        _accumulate(b, _sum_to_shape(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _lift(a)

    def backward(g: Array) -> None:
        _accumulate(a, g * s)

    return Tensor(a.data * s, _parents=(a,), _backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _sum_to_shape(ga, a.data.shape))
        _accumulate(b, _sum_to_shape(gb, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _lift(a)

    def backward(g: Array) -> None:
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = _lift(a)
    inverse = np.argsort(axes)

    def backward(g: Array) -> None:
        _accumulate(a, g.transpose(inverse))

    return Tensor(a.data.transpose(axes), _parents=(a,), _backward=backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accumulate(p, g[tuple(sl)])

    return Tensor(out_data, _parents=tuple(parts), _backward=backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds into the source."""

    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g: Array) -> None:
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return Tensor(a.data[idx], _parents=(a,), _backward=backward)


def mean_rows(a: Tensor, axis: int = 0) -> Tensor:
    a = _lift(a)
    n = a.data.shape[axis]
    out_data = a.data.mean(axis=axis)

    def backward(g: Array) -> None:
        _accumulate(a, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return Tensor(out_data, _parents=(a,), _backward=backward)


def masked_softmax(logits: Tensor, mask: Array | None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; masked-out positions get exactly zero weight.

    ``mask`` is boolean, True = attend. Rows with no unmasked entry are a
    contract violation: the query's own stream is always present.
    """

    logits = _lift(logits)
    x = logits.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not keep.any(axis=axis).all():
        raise ContractViolation("softmax row with every key masked")
    neg = np.where(keep, x, -np.inf)
    shifted = neg - neg.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(logits, p * (g - inner))

    return Tensor(p, _parents=(logits,), _backward=backward)


_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences converge."""

    a = _lift(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def backward(g: Array) -> None:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return Tensor(x * cdf, _parents=(a,), _backward=backward)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits), 1-D input."""

    logits = _lift(logits)
    x = logits.data
    if x.ndim != 1:
        raise ContractViolation(f"cross_entropy expects a 1-D logits vector, got {x.shape}")
    shifted = x - x.max()
    logsumexp = np.log(np.exp(shifted).sum()) + x.max()
    loss = logsumexp - x[target]
    probs = np.exp(x - logsumexp)

    def backward(g: Array) -> None:
        d = probs.copy()
        d[target] -= 1.0
        _accumulate(logits, g * d)

    return Tensor(loss, _parents=(logits,), _backward=backward)


def softmax_np(x: Array, axis: int = -1) -> Array:
    """Plain numpy softmax for inference-side consumers."""

    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
