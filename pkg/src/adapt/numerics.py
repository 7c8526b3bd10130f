"""Array arithmetic with a reverse-mode tape, seeded random streams and a
multiply-add counter.

Every differentiable primitive is a function that computes its value with
numpy and, when any operand requires a gradient, records a node whose
backward closure maps the output gradient to operand gradients.  Calling
:func:`backward` on a scalar replays the recorded nodes in reverse
topological order.

Primitives also report their cost to any active :class:`FlopCounter` using
fixed conventions (matmul ``m x k x n`` = ``2mkn``; softmax 5 per element;
layer/group norm 8 per element; activations 4 per element; everything else
free).  The analytic cost model in :mod:`adapt.flops` uses the same numbers.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "RandomSource",
    "gumbel_sample",
    "FlopCounter",
    "count_flops",
    "ShapeError",
]

SOFTMAX_FLOPS = 5
NORM_FLOPS = 8
ACTIVATION_FLOPS = 4

_GRAD_ENABLED = True
_COUNTERS: list["FlopCounter"] = []


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


# --------------------------------------------------------------------------
# flop accounting


@dataclass
class FlopCounter:
    total: int = 0
    by_op: dict[str, int] = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_flops():
    """Count multiply-adds of every primitive executed inside the block."""
    counter = FlopCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _bill(op: str, n: int) -> None:
    for c in _COUNTERS:
        c.add(op, n)


# --------------------------------------------------------------------------
# tensor + tape


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, keep_intermediate: bool = False) -> None:
    """Accumulate ``d(loss)/d(t)`` into ``t.grad`` for every tensor on the tape.

    Gradients of non-leaf nodes are released after use unless
    ``keep_intermediate`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                g = _unbroadcast(g, parent.shape)
            # grads are never mutated in place, so sharing arrays is safe
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=parent.dtype)
            else:
                parent.grad = parent.grad + g
        if not keep_intermediate:
            node.grad = None if node is not loss else node.grad
    if not keep_intermediate:
        loss.grad = np.ones_like(loss.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a.data, b.data)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.data, b.data)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        return (
            g * b.data if a.requires_grad else None,
            g * a.data if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        return (
            g / b.data if a.requires_grad else None,
            -g * out / b.data if b.requires_grad else None,
        )

    return _node(out, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def power(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))
    out = x * cdf
    _bill("gelu", ACTIVATION_FLOPS * x.size)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x * pdf),)

    return _node(out.astype(x.dtype, copy=False), (a,), bw, "gelu")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg = x < 0
    em1 = np.expm1(np.where(neg, x, 0.0))
    out = np.where(neg, alpha * em1, x).astype(x.dtype, copy=False)
    _bill("elu", ACTIVATION_FLOPS * x.size)

    def bw(g):
        return (g * np.where(neg, alpha * (em1 + 1.0), 1.0),)

    return _node(out, (a,), bw, "elu")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value is ``hard`` bit-for-bit; the gradient goes to ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {hard.shape} and {soft.shape} differ")
    return _node(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _bill("matmul", 2 * batch * m * k * n)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _node(out, (a,), bw, "mean")


def max_(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx_k, g, axis=axis)
        return (full,)

    return _node(out, (a,), bw, "max")


def masked_mean(x: Tensor, mask, axis: int = -2) -> Tensor:
    """Mean of ``x`` over ``axis`` weighted by ``mask``.

    ``mask`` has the shape of ``x`` without its trailing feature axis (for the
    default ``axis=-2``) and may itself be a Tensor carrying a gradient.
    """
    m = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=x.dtype))
    axis = axis % x.ndim
    if axis != x.ndim - 2 or m.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean: mask shape {m.shape} does not match {x.shape} on axis {axis}")
    w = m.data.astype(x.dtype, copy=False)[..., None]
    denom = w.sum(axis=axis, keepdims=True)
    if np.any(denom == 0):
        raise ValueError("masked_mean: mask selects no element")
    out_k = (x.data * w).sum(axis=axis, keepdims=True) / denom

    def bw(g):
        gk = np.expand_dims(g, axis)
        gx = gk * w / denom if x.requires_grad else None
        gm = None
        if m.requires_grad:
            gm = ((x.data - out_k) * gk).sum(axis=-1) / denom[..., 0]
        return gx, gm

    return _node(np.squeeze(out_k, axis), (x, m), bw, "masked_mean")


# --------------------------------------------------------------------------
# softmax family and normalization


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    _bill("softmax", SOFTMAX_FLOPS * x.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    _bill("softmax", SOFTMAX_FLOPS * x.size)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def masked_softmax(scores: Tensor, keep) -> Tensor:
    """Softmax over the last axis restricted to keys with ``keep == 1``.

    ``keep`` broadcasts against ``scores`` and holds 0/1 values in the forward
    pass.  Weights are ``exp(s) * keep / sum(exp(s) * keep)``, so dead keys get
    exactly zero weight while a gradient still reaches ``keep``.
    """
    k = keep if isinstance(keep, Tensor) else Tensor(np.asarray(keep, dtype=scores.dtype))
    _check_broadcast("masked_softmax", scores.data, k.data)
    s = scores.data
    kd = k.data
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    ek = e * kd
    z = ek.sum(axis=-1, keepdims=True)
    low = (z < 1e-30).squeeze(-1)
    if low.any():
        # live keys underflowed against a dead key's score: shift by the live max
        kfull = np.broadcast_to(kd, s.shape)
        live_max = np.where(kfull[low] > 0, s[low], -np.inf).max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(live_max)):
            raise ValueError("masked_softmax: a row has every key masked")
        e[low] = np.exp(np.minimum(s[low] - live_max, 80.0))
        ek = e * kd
        z = ek.sum(axis=-1, keepdims=True)
    out = ek / z
    _bill("softmax", SOFTMAX_FLOPS * s.size)

    def bw(g):
        inner = g - (g * out).sum(axis=-1, keepdims=True)
        gs = out * inner if scores.requires_grad else None
        gk = e / z * inner if k.requires_grad else None
        return gs, gk

    return _node(out, (scores, k), bw, "masked_softmax")


def layer_norm(a: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data
    _bill("layer_norm", NORM_FLOPS * x.size)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        if a.requires_grad:
            gh = g * weight.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gw, gb

    return _node(out, (a, weight, bias), bw, "layer_norm")


def group_norm(a: Tensor, weight: Tensor, bias: Tensor, groups: int = 4, eps: float = 1e-5) -> Tensor:
    """Normalize each row's channels (last axis) within ``groups`` groups.

    Statistics are per row, so rows never interact.
    """
    x = a.data
    c = x.shape[-1]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.reshape(x.shape[:-1] + (groups, c // groups))
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat_g = xc * rstd
    xhat = xhat_g.reshape(x.shape)
    out = xhat * weight.data + bias.data
    _bill("group_norm", NORM_FLOPS * x.size)

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, c).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        if a.requires_grad:
            gh = (g * weight.data).reshape(xg.shape)
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat_g * (gh * xhat_g).mean(axis=-1, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, gw, gb

    return _node(out, (a, weight, bias), bw, "group_norm")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} disagree off axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tensors, bw, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), bw, "getitem")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis 1 per batch element: ``(B, N, C), (B, M) -> (B, M, C)``."""
    idx = np.asarray(idx)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: expected (B,N,C) and (B,M), got {a.shape} and {idx.shape}")
    bidx = np.arange(a.shape[0])[:, None]
    out = a.data[bidx, idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (bidx, idx), g)
        return (full,)

    return _node(out, (a,), bw, "gather")


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return -mean(picked)


# --------------------------------------------------------------------------
# random streams


class RandomSource:
    """A named, reproducible stream of random draws.

    The stream is fully determined by ``(seed, stream_id)``; PCG64 is
    platform-independent, so the same pair gives the same draws everywhere.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream_id={self.stream_id})"

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id, "bit_generator": self.gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: dict) -> "RandomSource":
        rs = cls(state["seed"], state["stream_id"])
        rs.set_state(state)
        return rs


GUMBEL_CLAMP = 1e-12


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel_sample(rng: RandomSource, shape, dtype=np.float64) -> Tensor:
    """I.i.d. Gumbel(0, 1) draws as a constant tensor."""
    return Tensor(gumbel_from_uniform(rng.uniform(size=shape)).astype(dtype))


# --------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[], float], arrays: Iterable[np.ndarray], h: float = 1e-4,
                       indices: dict[int, Sequence[tuple]] | None = None) -> list[np.ndarray]:
    """Central differences of the scalar ``f()`` with respect to ``arrays``.

    The arrays are perturbed in place and restored.  With ``indices`` only the
    listed coordinates of array ``i`` are probed; the rest stay NaN.
    """
    grads = []
    for i, arr in enumerate(arrays):
        g = np.full(arr.shape, np.nan)
        coords = indices.get(i) if indices else None
        if coords is None:
            coords = list(np.ndindex(arr.shape))
        for c in coords:
            orig = arr[c]
            arr[c] = orig + h
            fp = f()
            arr[c] = orig - h
            fm = f()
            arr[c] = orig
            g[c] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads
