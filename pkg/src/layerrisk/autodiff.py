"""Reverse-mode automatic differentiation over a dynamic graph of numpy arrays.

Every operation returns a new :class:`Variable` that remembers its parents
together with a closure mapping the upstream gradient to that parent's
gradient contribution. Node ids come from a global counter, so sorting the
reachable nodes by id in descending order is a valid reverse topological
order.

Gradient closures accept upstream gradients with extra *leading* axes
(shape ``lead + out.shape``) and return ``lead + parent.shape``. This lets
:meth:`Variable.backward` push a whole stack of cotangents through the graph
in one sweep (``batched=True``), i.e. many vector-Jacobian products for the
cost of one traversal.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_node_ids = itertools.count()

GradFn = Callable[[np.ndarray], np.ndarray]


class Variable:
    __slots__ = ("value", "grad", "node_id", "parents", "requires_grad", "name")

    def __init__(self, value, parents: Iterable[tuple["Variable", GradFn]] = (),
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        # only keep edges that lead somewhere differentiable
        self.parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
        self.requires_grad = bool(requires_grad or self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None, *, batched: bool = False,
                 retain_intermediate: bool = True) -> None:
        """Accumulate d(self)/d(v) into ``v.grad`` for every reachable ``v``.

        Without ``seed`` the variable must hold a single element. A ``seed`` of
        the output's shape computes a vector-Jacobian product; with
        ``batched=True`` the seed carries one extra leading axis and every
        gradient gains that axis too. ``retain_intermediate=False`` stores
        gradients on leaves only.
        """
        if seed is None:
            if self.value.size != 1:
                raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.value)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            expected = seed.shape[1:] if batched else seed.shape
            if expected != self.shape:
                raise DimensionError(f"seed shape {seed.shape} does not match output shape {self.shape}")
        if not self.requires_grad:
            return

        upstream: dict[int, np.ndarray] = {self.node_id: seed}
        for node in _reachable(self):
            g = upstream.pop(node.node_id, None)
            if g is None:
                continue
            if retain_intermediate or not node.parents:
                node.grad = g if node.grad is None else node.grad + g
            for parent, fn in node.parents:
                contrib = fn(g)
                prev = upstream.get(parent.node_id)
                upstream[parent.node_id] = contrib if prev is None else prev + contrib

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _reachable(root: Variable) -> list[Variable]:
    seen: dict[int, Variable] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(p for p, _ in node.parents if p.node_id not in seen)
    return sorted(seen.values(), key=lambda v: v.node_id, reverse=True)


def _lift(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(x)


def _lead(g: np.ndarray, out_ndim: int) -> tuple[int, ...]:
    return g.shape[:g.ndim - out_ndim]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...], out_ndim: int) -> np.ndarray:
    """Sum ``g`` (lead + out shape) down to lead + ``shape`` under numpy broadcasting."""
    nlead = g.ndim - out_ndim
    extra = out_ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(nlead, nlead + extra)))
    axes = tuple(nlead + i for i, size in enumerate(shape) if size == 1 and g.shape[nlead + i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    out = a.value + b.value
    nd = out.ndim
    return Variable(out, [
        (a, lambda g: _unbroadcast(g, a.shape, nd)),
        (b, lambda g: _unbroadcast(g, b.shape, nd)),
    ])


def neg(a: Variable) -> Variable:
    return Variable(-a.value, [(a, lambda g: -g)])


def mul(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    out = a.value * b.value
    nd = out.ndim
    return Variable(out, [
        (a, lambda g: _unbroadcast(g * b.value, a.shape, nd)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape, nd)),
    ])


def relu(x: Variable) -> Variable:
    mask = x.value > 0
    return Variable(np.maximum(x.value, 0.0), [(x, lambda g: g * mask)])


# ---------------------------------------------------------------- reductions / shape

def vsum(x: Variable, axis: int | None = None) -> Variable:
    out = x.value.sum(axis=axis)
    if axis is not None and axis < 0:
        axis += x.ndim

    def grad(g):
        lead = _lead(g, out.ndim)
        if axis is None:
            g = g.reshape(lead + (1,) * x.ndim)
        else:
            g = np.expand_dims(g, len(lead) + axis)
        return np.broadcast_to(g, lead + x.shape).copy()

    return Variable(out, [(x, grad)])


def mean(x: Variable) -> Variable:
    return mul(vsum(x), 1.0 / x.value.size)


def reshape(x: Variable, shape) -> Variable:
    out = x.value.reshape(shape)
    return Variable(out, [(x, lambda g: g.reshape(_lead(g, out.ndim) + x.shape))])


def flatten(x: Variable) -> Variable:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Variable:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")
    return Variable(a.value @ b.value, [
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ])


def linear(x: Variable, weight: Variable, bias: Variable) -> Variable:
    return add(matmul(x, weight), bias)


def conv2d(x: Variable, weight: Variable, bias: Variable | None = None,
           stride: int = 1, padding: int = 0) -> Variable:
    """2-D cross-correlation. x: (N, C, H, W), weight: (F, C, kh, kw), bias: (F,)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {cw}")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.value
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    # im2col in (N, C*kh*kw, Ho*Wo) order so the output comes out in NCHW
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    wmat = weight.value.reshape(f, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, f, ho, wo)
    if bias is not None:
        out += bias.value[None, :, None, None]
    wmat_t = np.ascontiguousarray(wmat.T)                     # (C*kh*kw, F)

    def grad_x(g):
        lead = _lead(g, 4)
        # each tap slice of dcols is a contiguous (Ho, Wo) block
        gb = np.ascontiguousarray(g).reshape(-1, f, ho * wo)
        dcols = np.matmul(wmat_t, gb).reshape(lead + (n, c, kh, kw, ho, wo))
        dxp = np.zeros(lead + (n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[..., i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j, :, :]
        if padding:
            return dxp[..., padding:padding + h, padding:padding + w]
        return dxp

    def grad_w(g):
        lead = _lead(g, 4)
        gb = g.reshape(lead + (n, f, ho * wo))
        return np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=-3).reshape(lead + weight.shape)

    parents = [(x, grad_x), (weight, grad_w)]
    if bias is not None:
        parents.append((bias, lambda g: g.sum(axis=(-4, -2, -1))))
    return Variable(out, parents)


def maxpool2d(x: Variable, size: int = 2) -> Variable:
    """Non-overlapping max pooling; rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximal element in row-major window order.
    """
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool window {size} larger than input {h}x{w}")
    views = [x.value[:, :, i:ho * size:size, j:wo * size:size] for i in range(size) for j in range(size)]
    out = views[0].copy()
    winner = np.zeros(out.shape, dtype=np.int64)
    for t, v in enumerate(views[1:], start=1):
        better = v > out
        out[better] = v[better]
        winner[better] = t

    def grad(g):
        lead = _lead(g, 4)
        dx = np.zeros(lead + (n, c, h, w))
        for t in range(size * size):
            i, j = divmod(t, size)
            dx[..., i:ho * size:size, j:wo * size:size] = g * (winner == t)
        return dx

    return Variable(out, [(x, grad)])


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Variable, labels) -> Variable:
    """Mean softmax cross-entropy over the batch; ``labels`` are integer classes."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} and labels {labels.shape} disagree")
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -log_probs[rows, labels].mean()
    d = np.exp(log_probs)
    d[rows, labels] -= 1.0
    d /= z.shape[0]
    return Variable(loss, [(logits, lambda g: np.multiply.outer(g, d))])


def sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_binary_cross_entropy(logits: Variable, targets) -> Variable:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    z = logits.value
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    loss = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
    d = (sigmoid(z) - y) / z.size
    return Variable(loss, [(logits, lambda g: np.multiply.outer(g, d))])
