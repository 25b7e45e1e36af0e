"""Dense f64 tensors with a dynamic reverse-mode tape.

Every op on a tracked tensor records its parents and a backward rule on the
result.  :func:`backward` sorts the recorded nodes topologically, runs the
rules in reverse order and then releases the graph, so a second call on the
same loss raises :class:`GraphStateError`.  Leaves (tensors created by the
user with ``requires_grad=True``) accumulate into ``.grad``.

Only scalar broadcasting is supported.  Row-wise broadcasting (bias add,
per-feature noise scales) goes through the explicit :func:`broadcast_rows`.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError, GraphStateError

_node_ids = itertools.count(1)


class Tensor:
    """A dense float64 array that may participate in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id = next(_node_ids) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._released = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], rule) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._released = False
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out.node_id = next(_node_ids)
            out._parents = tuple(parents)
            out._backward = rule
        else:
            out.requires_grad = False
            out.node_id = None
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._released

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tensor_sum(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))
    if _is_scalar(b):
        return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, np.sum(g)))
    if _is_scalar(a):
        return Tensor._from_op(a.data + b.data, (a, b), lambda g: (np.sum(g), g))
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))
    if _is_scalar(b):
        return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -np.sum(g)))
    if _is_scalar(a):
        return Tensor._from_op(a.data - b.data, (a, b), lambda g: (np.sum(g), -g))
    raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if _is_scalar(b):
        return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, np.sum(g * ad)))
    if _is_scalar(a):
        return Tensor._from_op(ad * bd, (a, b), lambda g: (np.sum(g * bd), g * ad))
    raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def scale(a, c: float) -> Tensor:
    """Multiply by a constant (not differentiated)."""
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sign(a) -> Tensor:
    # sign(0) = 0; derivative is zero everywhere.
    a = as_tensor(a)
    return Tensor._from_op(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * s,))


def clamp(a, lo, hi) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes only strictly inside the bounds.

    ``lo`` and ``hi`` may be scalars or constant arrays of ``a``'s shape.
    """
    a = as_tensor(a)
    lo_arr = lo.data if isinstance(lo, Tensor) else np.asarray(lo, dtype=np.float64)
    hi_arr = hi.data if isinstance(hi, Tensor) else np.asarray(hi, dtype=np.float64)
    for bound in (lo_arr, hi_arr):
        if bound.ndim and bound.shape != a.shape:
            raise DimensionError(f"clamp: bound shape {bound.shape} vs {a.shape}")
    out = np.minimum(np.maximum(a.data, lo_arr), hi_arr)
    inside = (a.data > lo_arr) & (a.data < hi_arr)
    return Tensor._from_op(out, (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "scale": scale,
    "sign": sign,
    "clamp": clamp,
    "abs": absolute,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Shape and reduction ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,))


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._from_op(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(tensor_sum(a), 1.0 / a.size)


def broadcast_rows(v, rows: int) -> Tensor:
    """Stack a vector ``rows`` times into a ``rows x n`` matrix."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise DimensionError(f"broadcast_rows expects a vector, got shape {v.shape}")
    out = np.broadcast_to(v.data, (rows, v.shape[0])).copy()
    return Tensor._from_op(out, (v,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _conv_geometry(x_shape, w_shape, stride, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x_shape} and {w_shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    _, c, h, w = x_shape
    _, cw, kh, kw = w_shape
    if c != cw:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {cw}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``B x C x H x W`` input with ``F x C x kh x kw`` kernels."""
    x, w = as_tensor(x), as_tensor(w)
    ho, wo = _conv_geometry(x.shape, w.shape, stride, padding)
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, f).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding:padding + h, padding:padding + wd]
        return dx, dw

    return Tensor._from_op(np.ascontiguousarray(out), (x, w), rule)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be B x C, got {logits.shape}")
    labels = np.asarray(labels)
    bsz, n_cls = logits.shape
    if labels.shape != (bsz,):
        raise DimensionError(f"expected {bsz} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise IndexError(f"labels must lie in [0, {n_cls})")
    labels = labels.astype(np.intp)
    logp = log_softmax(logits.data)
    rows = np.arange(bsz)
    loss = -logp[rows, labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / bsz),)

    return Tensor._from_op(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from ``loss``.

    The graph is released afterwards; calling again on the same loss raises
    :class:`GraphStateError`.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward needs a scalar tensor")
    if loss._released:
        raise GraphStateError("graph already released by a previous backward call; re-run the forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._released:
            raise GraphStateError("graph contains a node released by an earlier backward call")
        if node._backward is None:
            if g is not None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node._released = True


def finite_difference_grad(f: Callable[[Tensor], object], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def call(arr):
        out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        gflat[i] = (call(plus.reshape(base.shape)) - call(minus.reshape(base.shape))) / (2.0 * h)
    return grad
