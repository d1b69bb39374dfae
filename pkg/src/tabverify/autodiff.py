"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray and remembers how it was
produced; :func:`backward` replays the tape in reverse topological order
and accumulates exact gradients into every tensor that requires them.
Only the operations the encoder and its heads need are provided, each
with a hand-derived backward rule. Everything is deterministic: no op
uses randomness, and accumulation order is fixed by construction order.
"""

from __future__ import annotations

import math

import numpy as np

DTYPE = np.float64


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None,
                 name=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(
            p.requires_grad for p in parents
        )
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={self.grad is not None})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(
        i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Iterative post-order topological sort; graphs can be deep.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementwise and linear algebra ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return Tensor(out_data, parents=(a,), backward=bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        _accumulate(a, g / a.data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor(out_data, parents=(a,), backward=bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation.

    f(x)  = 0.5 * x * (1 + tanh(u)),  u = sqrt(2/pi) * (x + 0.044715 * x^3)
    f'(x) = 0.5 * (1 + tanh(u))
          + 0.5 * x * (1 - tanh(u)^2) * sqrt(2/pi) * (1 + 3 * 0.044715 * x^2)
    """
    a = as_tensor(a)
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    u = c * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out_data = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = c * (1.0 + 3 * 0.044715 * x**2)
        deriv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du
        _accumulate(a, g * deriv)

    return Tensor(out_data, parents=(a,), backward=bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, floor)
    pass_through = a.data > floor

    def bwd(g):
        _accumulate(a, g * pass_through)

    return Tensor(out_data, parents=(a,), backward=bwd)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(out_data, parents=(a,), backward=bwd)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def bwd(g):
        _accumulate(a, g.transpose(inverse))

    return Tensor(out_data, parents=(a,), backward=bwd)


def select_index(a: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along an axis (the axis is removed)."""
    a = as_tensor(a)
    out_data = np.take(a.data, index, axis=axis)

    def bwd(g):
        gg = np.zeros_like(a.data)
        sl: list = [slice(None)] * a.data.ndim
        sl[axis] = index
        gg[tuple(sl)] = g
        _accumulate(a, gg)

    return Tensor(out_data, parents=(a,), backward=bwd)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather; the backward scatter-adds into the table."""
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            gg = np.zeros_like(table.data)
            np.add.at(gg, idx, g)
            _accumulate(table, gg)

    return Tensor(out_data, parents=(table,), backward=bwd)


# ---------------------------------------------------------------------------
# Fused neural ops
# ---------------------------------------------------------------------------

def masked_softmax(scores: Tensor, key_mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with masked keys receiving exactly 0.

    ``key_mask`` is a boolean array broadcastable to ``scores``; every
    row must keep at least one unmasked key.
    """
    scores = as_tensor(scores)
    masked = np.where(key_mask, scores.data, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=-1, keepdims=True)

    def bwd(g):
        if scores.requires_grad:
            inner = (g * probs).sum(axis=-1, keepdims=True)
            _accumulate(scores, probs * (g - inner))

    return Tensor(probs, parents=(scores,), backward=bwd)


def softmax(scores: Tensor) -> Tensor:
    return masked_softmax(scores, np.ones_like(as_tensor(scores).data, dtype=bool))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return Tensor(out_data, parents=(x, gain, bias), backward=bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))
