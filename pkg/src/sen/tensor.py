"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every primitive checks shapes strictly. There is no implicit broadcasting:
``add_bias`` is the only op that expands a tensor along leading axes, and
``linear``/``matmul`` are the only ops that share a weight over a batch.

A node is recorded only when at least one input requires a gradient, so a
forward pass through frozen weights with constant inputs costs no tape
memory.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels

GELU_C = 0.7978845608
GELU_A = 0.044715
LN_EPS = 1e-5

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NumericError(ArithmeticError):
    """Raised on NaN input or an undefined numeric result."""


class Tensor:
    """Dense row-major array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar maps onto the strict primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


# ---------------------------------------------------------------- tape


def tape(root: Tensor) -> list:
    """Topologically ordered nodes reachable from ``root`` (inputs first)."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
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


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- checks


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _axis(x: Tensor, axis: int, op: str) -> int:
    nd = x.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")
    return axis % nd


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing slice of ``x``; ``b.shape`` must equal ``x.shape[-b.ndim:]``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not trail {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def bw(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _record(x.data + b.data, (x, b), bw, "add_bias")


def add_expand(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add ``b`` repeated along ``axis`` of ``x``; ``b.shape`` is ``x.shape`` without ``axis``."""
    ax = _axis(x, axis, "add_expand")
    if b.shape != x.shape[:ax] + x.shape[ax + 1:]:
        raise ShapeError(f"add_expand: {b.shape} is not {x.shape} without axis {ax}")
    return _record(x.data + np.expand_dims(b.data, ax), (x, b),
                   lambda g: (g, g.sum(axis=ax)), "add_expand")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = np.ascontiguousarray(x.data)
    t = np.empty_like(xd)
    _kernels.gelu_inner(xd, GELU_C, GELU_A, t)
    np.tanh(t, out=t)
    out = np.empty_like(xd)
    _kernels.gelu_outer(xd, t, out)

    def bw(g):
        return (_kernels.gelu_backward(xd, t, np.ascontiguousarray(g), GELU_C, GELU_A),)

    return _record(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if ad.ndim > 2 \
                    else ad.T @ g
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``.

    ``w`` is ``(k, n)`` shared over all leading axes, or grouped ``(G, k, n)``
    with ``x.shape[0] == G`` and bias ``(G, n)``.
    """
    grouped = w.ndim == 3
    if w.ndim not in (2, 3) or x.ndim < 1 or x.shape[-1] != w.shape[-2] \
            or (grouped and (x.ndim < 2 or x.shape[0] != w.shape[0])):
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != w.shape[:-2] + w.shape[-1:]:
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    k, n = wd.shape[-2:]
    x2 = xd.reshape((xd.shape[0], -1, k) if grouped else (-1, k))
    out = x2 @ wd
    if b is not None:
        out += b.data[:, None, :] if grouped else b.data
    out = out.reshape(xd.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(x2.shape[:-1] + (n,))
        gx = (g2 @ np.swapaxes(wd, -1, -2)).reshape(xd.shape) if x.requires_grad else None
        gw = np.swapaxes(x2, -1, -2) @ g2 if w.requires_grad else None
        gb = g2.sum(axis=-2) if (b is not None and b.requires_grad) else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw, "linear")


# ---------------------------------------------------------------- reductions


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        shape = x.shape
        return _record(np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    ax = _axis(x, axis, "reduce_sum")
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape),)

    return _record(x.data.sum(axis=ax), (x,), bw, "sum")


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        n = x.size
        shape = x.shape
        return _record(np.asarray(x.data.mean()), (x,),
                       lambda g: (np.full(shape, float(g) / n),), "mean")
    ax = _axis(x, axis, "reduce_mean")
    n = x.shape[ax]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), shape),)

    return _record(x.data.mean(axis=ax), (x,), bw, "mean")


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis, "softmax")
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax: NaN input")
    e = np.exp(xd - xd.max(axis=ax, keepdims=True))
    p = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return _record(p, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis, then scale/shift.

    ``gamma``/``beta`` are ``(d,)``, or ``(G, d)`` with ``x.shape[0] == G``
    for per-group affine parameters.
    """
    d = x.shape[-1]
    if gamma.shape != beta.shape or gamma.shape[-1:] != (d,) or gamma.ndim > 2 \
            or (gamma.ndim == 2 and (x.ndim < 2 or x.shape[0] != gamma.shape[0])):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    shape = x.shape
    g2 = gamma.data.reshape(-1, d)
    out, xhat, inv = _kernels.ln_forward(x.data.reshape(-1, d), g2, beta.data.reshape(-1, d), eps)

    def bw(g):
        gx, gg, gb = _kernels.ln_backward(np.ascontiguousarray(g).reshape(-1, d), xhat, inv, g2)
        return gx.reshape(shape), gg.reshape(gamma.shape), gb.reshape(beta.shape)

    return _record(out.reshape(shape), (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Scale the last axis to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True)) + eps
    if (norm == 0).any():
        raise NumericError("l2_normalize: zero-norm vector")
    y = xd / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _record(y, (x,), bw, "l2_normalize")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Multi-head softmax(q kᵀ/√dh) v for ``q, k, v`` of shape ``[..., T, d]``.

    Heads are contiguous slices of width ``d // heads`` of the last axis.
    """
    _same_shape(q, k, "attention")
    _same_shape(q, v, "attention")
    *lead, t, d = q.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"attention: {heads} heads do not divide width {d}")
    dh = d // heads
    split = (*lead, t, heads, dh)

    def to_heads(a):
        return np.swapaxes(a.reshape(split), -2, -3)          # [..., h, T, dh]

    def from_heads(a):
        return np.ascontiguousarray(np.swapaxes(a, -2, -3)).reshape(q.shape)

    qh, kh, vh = to_heads(q.data), to_heads(k.data), to_heads(v.data)
    s = 1.0 / math.sqrt(dh)
    scores = qh @ np.swapaxes(kh, -1, -2)
    scores *= s
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores, out=scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = from_heads(p @ vh)

    def bw(g):
        gh = to_heads(g)
        gv = np.swapaxes(p, -1, -2) @ gh
        gp = gh @ np.swapaxes(vh, -1, -2)
        gp -= (gp * p).sum(axis=-1, keepdims=True)
        gp *= p
        gp *= s
        gq = gp @ kh
        gk = np.swapaxes(gp, -1, -2) @ qh
        return from_heads(gq), from_heads(gk), from_heads(gv)

    return _record(out, (q, k, v), bw, "attention")


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[..., C]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    logp = z - lse
    flat = logp.reshape(-1, z.shape[-1])
    idx = labels.reshape(-1)
    n = idx.size
    loss = -flat[np.arange(n), idx].sum() / n

    def bw(g):
        grad = np.exp(logp).reshape(-1, z.shape[-1])
        grad[np.arange(n), idx] -= 1.0
        return ((grad * (float(g) / n)).reshape(z.shape),)

    return _record(np.asarray(loss), (logits,), bw, "cross_entropy")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gd = diff * (2.0 * float(g) / n)
        return gd, -gd

    return _record(np.asarray((diff * diff).mean()), (pred, target), bw, "mse")


# ---------------------------------------------------------------- structure


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty list")
    ax = _axis(parts[0], axis, "concat")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: {p.shape} disagrees with {ref} off axis {ax}")
    if len(parts) == 1:
        return _record(parts[0].data.copy(), parts, lambda g: (g,), "concat")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("stack: empty list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise ShapeError(f"stack: {p.shape} disagrees with {ref}")
    nd = len(ref) + 1
    if not -nd <= axis < nd:
        raise ShapeError(f"stack: axis {axis} out of range")
    ax = axis % nd

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _record(np.stack([p.data for p in parts], axis=ax), parts, bw, "stack")


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _record(np.array(x.data[index]), (x,), bw, "getitem")


def const_matmul(x: Tensor, m: np.ndarray) -> Tensor:
    """``x @ m`` for a fixed matrix ``m`` over the last axis of ``x``."""
    m = np.asarray(m, dtype=DEFAULT_DTYPE)
    if m.ndim != 2 or x.shape[-1] != m.shape[0]:
        raise ShapeError(f"const_matmul: {x.shape} does not match {m.shape}")
    return _record(x.data @ m, (x,), lambda g: (g @ m.T,), "const_matmul")
