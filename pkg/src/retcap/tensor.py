"""Dense tensors with define-by-run reverse-mode differentiation.

Every op records its inputs and a closure mapping the output gradient to
input gradients. Nodes get a monotonically increasing id when created, so
sorting reachable nodes by id in descending order replays the graph in
exact reverse of construction order.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "ContractError", "NonFiniteError", "no_grad",
    "tensor", "matmul", "add", "sub", "mul", "neg", "scale", "exp", "log",
    "relu", "sigmoid", "softmax", "log_softmax", "layer_norm",
    "pointwise_affine", "broadcast_add", "concat", "reshape", "transpose",
    "embedding_lookup", "cross_entropy", "sum", "mean", "conv2d",
]

_FLOAT_TYPES = (np.float32, np.float64)
_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


@contextmanager
def no_grad():
    """Run ops without recording a graph (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if dtype is None and arr.dtype.type not in _FLOAT_TYPES:
        arr = arr.astype(np.float64)
    if arr.dtype.type not in _FLOAT_TYPES:
        raise TypeError(f"unsupported element type {arr.dtype}; use float32 or float64")
    return arr


class Tensor:
    """An n-dimensional float32/float64 array that can take part in a graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor created with non-finite values")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

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
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype, requires_grad: bool | None = None) -> Tensor:
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.astype(dtype), requires_grad=rg)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = parent._id
                grads[pid] = grads[pid] + pg if pid in grads else pg
            if not retain_graph:
                node._parents = ()
                node._backward = None
                node.requires_grad = False


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_node_ids)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


broadcast_add = add


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar without promoting the element type."""
    f = x.dtype.type(factor)
    return _result(x.data * f, (x,), lambda g: (g * f,), "scale")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _result(y, (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = np.exp(-np.logaddexp(0, -x.data)).astype(x.dtype)
    return _result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


# reductions / shape ----------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ContractError("concat of an empty sequence")
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(y, xs, backward, "concat")


def _getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(x.data[idx]), (x,), backward, "getitem")


# linear algebra ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def pointwise_affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` applied independently to each position of ``x``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# normalization -------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-9) -> Tensor:
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match axis length {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd = gain.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + x.dtype.type(eps))
    xhat = xc * rstd
    y = xhat * gd + bias.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * gd
        gx = rstd * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return _result(y.astype(x.dtype), (x, gain, bias), backward, "layer_norm")


# lookup / loss -------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; output shape is ``ids.shape + (d,)``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"token ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0]
        raise IndexError(f"token id {bad} outside vocabulary of size {vocab}")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_id``."""
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    flat_t = targets.reshape(-1)
    keep = np.ones_like(flat_t, dtype=bool) if ignore_id is None else flat_t != ignore_id
    kept = flat_t[keep]
    if kept.size and (kept.min() < 0 or kept.max() >= vocab):
        bad = kept[(kept < 0) | (kept >= vocab)][0]
        raise IndexError(f"target id {bad} outside vocabulary of size {vocab}")
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy: every target position is ignored")
    flat = logits.data.reshape(-1, vocab)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, kept].sum() / count

    def backward(g):
        grad = np.exp(logp)
        grad[~keep] = 0
        grad[rows, kept] -= 1
        return ((grad * (g / count)).reshape(logits.shape).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# convolution -----------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 2-D convolution: x (B,H,W,Ci), weight (kh,kw,Ci,Co)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    B, H, W, Ci = x.shape
    kh, kw, _, Co = weight.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, Ci), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * Ci)
    w2 = weight.data.reshape(kh * kw * Ci, Co)
    y = (cols2 @ w2 + bias.data).reshape(B, Ho, Wo, Co)

    def backward(g):
        g2 = g.reshape(-1, Co)
        gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, Ci)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + H, padding:padding + W, :]
        return gx, (cols2.T @ g2).reshape(weight.shape), g2.sum(axis=0)

    return _result(y, (x, weight, bias), backward, "conv2d")
