"""Dense arrays with reverse-mode gradient accumulation.

A `Tensor` wraps a numpy array (float32 unless a `precision` context says
otherwise) and remembers the operation that produced it.  `backward` walks
the graph once in reverse topological order and accumulates gradients.

Broadcasting is deliberately narrow: binary operations accept either two
operands of identical shape or one operand of size 1.  Anything else must go
through an explicit `broadcast_to`, whose backward rule sums the expanded
axes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

_DTYPE = np.float32


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (gradient checks run in float64)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method aliases ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


# -- binary elementwise ---------------------------------------------------
def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _result_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return a.shape if b.size == 1 else b.shape


def _scalar_view(t: Tensor, out_shape: tuple) -> np.ndarray:
    # size-1 operands are reshaped so numpy broadcasts them without adding axes
    if t.shape == out_shape:
        return t.data
    return t.data.reshape(())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    shp = _result_shape(a, b)
    value = _scalar_view(a, shp) + _scalar_view(b, shp)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape) if a.shape != shp else g)
        _accum(b, _unbroadcast(g, b.shape) if b.shape != shp else g)

    return _make(np.broadcast_to(value, shp), (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    shp = _result_shape(a, b)
    value = _scalar_view(a, shp) - _scalar_view(b, shp)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape) if a.shape != shp else g)
        _accum(b, -(_unbroadcast(g, b.shape) if b.shape != shp else g))

    return _make(np.broadcast_to(value, shp), (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    shp = _result_shape(a, b)
    av, bv = _scalar_view(a, shp), _scalar_view(b, shp)
    value = av * bv

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(np.broadcast_to(g * bv, shp), a.shape) if a.shape != shp else g * bv
        if b.requires_grad:
            b.grad += _unbroadcast(np.broadcast_to(g * av, shp), b.shape) if b.shape != shp else g * av

    return _make(np.broadcast_to(value, shp), (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    shp = _result_shape(a, b)
    av, bv = _scalar_view(a, shp), _scalar_view(b, shp)
    value = av / bv

    def bw(g):
        if a.requires_grad:
            ga = np.broadcast_to(g / bv, shp)
            a.grad += _unbroadcast(ga, a.shape) if a.shape != shp else ga
        if b.requires_grad:
            gb = np.broadcast_to(-g * av / (bv * bv), shp)
            b.grad += _unbroadcast(gb, b.shape) if b.shape != shp else gb

    return _make(np.broadcast_to(value, shp), (a, b), "div", bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), "neg", bw)


# -- linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; batched operands must share identical leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    value = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.grad += g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            b.grad += np.swapaxes(a.data, -1, -2) @ g

    return _make(value, (a, b), "matmul", bw)


# -- unary elementwise ----------------------------------------------------
def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), "relu", bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    value = np.exp(a.data)

    def bw(g):
        _accum(a, g * value)

    return _make(value, (a,), "exp", bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")

    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), "log", bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("sqrt needs strictly positive input for a finite gradient")
    value = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / value)

    return _make(value, (a,), "sqrt", bw)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    if exponent < 1 and np.any(a.data <= 0):
        raise DomainError(f"power {exponent} of non-positive value")
    value = a.data**exponent

    def bw(g):
        _accum(a, g * exponent * a.data ** (exponent - 1))

    return _make(value, (a,), "pow", bw)


# -- reductions -----------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, _expand_reduced(g, a.shape, axis, keepdims))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    value = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.size(value), 1)

    def bw(g):
        _accum(a, _expand_reduced(g, a.shape, axis, keepdims) / count)

    return _make(value, (a,), "mean", bw)


def l2norm(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along `axis`; zero vectors get a zero subgradient."""
    a = _as_tensor(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        _accum(a, gk * a.data / safe * (norm > 0))

    value = norm if keepdims else np.squeeze(norm, axis=axis)
    return _make(value, (a,), "l2norm", bw)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        _accum(a, gk * soft)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _make(value, (a,), "logsumexp", bw)


# -- shape manipulation ---------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(value, (a,), "reshape", bw)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inverse))

    return _make(np.transpose(a.data, axes), (a,), "transpose", bw)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))

    return _make(value, (a,), "broadcast", bw)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    basic = _is_basic_index(idx)
    value = a.data[idx]

    def bw(g):
        if not a.requires_grad:
            return
        if basic:
            a.grad[idx] += g
        else:
            np.add.at(a.grad, idx, g)

    return _make(np.array(value), (a,), "getitem", bw)


def take(a, indices, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    idx = (slice(None),) * axis + (np.asarray(indices, dtype=np.intp),)
    return getitem(a, idx)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    value = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _make(value, ts, "concat", bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    value = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            _accum(t, np.take(g, i, axis=axis))

    return _make(value, ts, "stack", bw)


# -- backward -------------------------------------------------------------
def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Fill `.grad` on every node reachable from scalar `root`; return leaf gradients."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _toposort(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    return {node: node.grad for node in order if not node._parents}
