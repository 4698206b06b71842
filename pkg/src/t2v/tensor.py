"""Minimal rank-N tensor with tape-based reverse-mode differentiation.

Tensors wrap a numpy array (float32 by default). Every differentiable op
records a node carrying a monotonically increasing sequence number; calling
:func:`backward` walks the reachable nodes in reverse recording order, which
is a valid reverse topological order by construction.

Computation follows numpy dtype promotion, so feeding float64 inputs runs
the whole graph in float64. :func:`finite_diff_check` relies on that.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


class TensorError(ValueError):
    """Raised on invalid shapes, domains or graph misuse."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def exact_enabled() -> bool:
    return getattr(_state, "exact", True)


@contextmanager
def fast_matmul():
    """Let forward products accumulate in the operands' own precision.

    Faster, but results may then depend on batch composition; used where
    only the trained parameters matter (e.g. codec fitting).
    """
    prev = exact_enabled()
    _state.exact = False
    try:
        yield
    finally:
        _state.exact = prev


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("parents", "backward", "seq")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)


ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        # python numbers/lists become float32; float ndarrays keep their precision
        arr = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=DEFAULT_DTYPE)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t: Tensor):
    raise TensorError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x if isinstance(x, np.ndarray) else np.asarray(x, dtype=DEFAULT_DTYPE))


def _scalar_like(x):
    """Python scalars stay weakly typed so they never upcast float32 data."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating)):
        return float(x)
    return Tensor(x)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and record a tape node when any parent needs gradients.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise TensorError(f"{what} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_operands(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TensorError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _scalar_like(a)
    if not isinstance(b, Tensor):
        b = _scalar_like(b)
    return a, b


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _tensors(*xs):
    return [x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in xs]


def _check_shapes(a, b, op):
    sa = a.shape if isinstance(a, Tensor) else ()
    sb = b.shape if isinstance(b, Tensor) else ()
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise TensorError(f"{op}: incompatible shapes {sa} and {sb}") from None


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_shapes(a, b, "add")
    out = _data(a) + _data(b)
    sa, sb = np.shape(_data(a)), np.shape(_data(b))

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_result(out, _tensors(a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_shapes(a, b, "sub")
    out = _data(a) - _data(b)
    sa, sb = np.shape(_data(a)), np.shape(_data(b))

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_result(out, _tensors(a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_shapes(a, b, "mul")
    ad, bd = _data(a), _data(b)
    out = ad * bd
    sa, sb = np.shape(ad), np.shape(bd)

    def bw(g):
        ga = unbroadcast(g * bd, sa) if _needs(a) else None
        gb = unbroadcast(g * ad, sb) if _needs(b) else None
        return ga, gb

    return make_result(out, _tensors(a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_shapes(a, b, "div")
    ad, bd = _data(a), _data(b)
    if np.any(np.asarray(bd) == 0):
        raise TensorError("div: zero denominator")
    out = ad / bd
    sa, sb = np.shape(ad), np.shape(bd)

    def bw(g):
        ga = unbroadcast(g / bd, sa) if _needs(a) else None
        gb = unbroadcast(-g * ad / (bd * bd), sb) if _needs(b) else None
        return ga, gb

    return make_result(out, _tensors(a, b), bw)


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def silu(x: Tensor) -> Tensor:
    d = x.data
    sig = 1.0 / (1.0 + np.exp(-np.clip(d, -80, 80)))
    out = d * sig

    def bw(g):
        return (g * (sig * (1.0 + d * (1.0 - sig))),)

    return make_result(out.astype(d.dtype, copy=False), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = (1.0 / (1.0 + np.exp(-np.clip(d, -80, 80)))).astype(d.dtype, copy=False)

    def bw(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(x.data), "exp")

    def bw(g):
        return (g * out,)

    return make_result(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise TensorError("log: non-positive argument")
    out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return make_result(out, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise TensorError("sqrt: negative argument")
    out = np.sqrt(x.data)

    def bw(g):
        if np.any(out == 0):
            raise TensorError("sqrt: gradient undefined at 0")
        return (g * 0.5 / out,)

    return make_result(out, (x,), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return make_result(out, (x,), bw)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
}
_UNARY = {"silu": silu, "exp": exp, "sqrt": sqrt}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch ``kind`` in {add, sub, mul, div, silu, exp, sqrt}."""
    if kind in _ELEMENTWISE:
        if b is None:
            raise TensorError(f"{kind} needs two operands")
        return _ELEMENTWISE[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](as_tensor(a))
    raise TensorError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape ops
# ---------------------------------------------------------------------------

def mm(a: np.ndarray, b: np.ndarray, exact: bool = True) -> np.ndarray:
    """Matrix product returned in the operands' dtype.

    With ``exact`` the product accumulates in float64: float32 BLAS kernels
    change summation order with the row count, which would make a frame's
    result depend on how many frames share the batch. Backward passes that
    only feed parameter updates use ``exact=False``.
    """
    dtype = np.result_type(a, b)
    if dtype == np.float64 or not exact or not exact_enabled():
        return a @ b
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(dtype)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise TensorError(f"matmul: batch dims not broadcastable, {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    out = mm(ad, bd)

    def bw(g):
        ga = unbroadcast(mm(g, np.swapaxes(bd, -1, -2), exact=False), ad.shape) if a.requires_grad else None
        gb = unbroadcast(mm(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise TensorError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis``; sums accumulate in float64."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise TensorError("reduce over an empty axis")
    d = x.data
    if kind == "sum":
        out = d.sum(axis=axes, keepdims=True, dtype=np.float64).astype(d.dtype)
        scale = None
    elif kind == "mean":
        count = int(np.prod([d.shape[a] for a in axes])) if axes else 1
        out = (d.sum(axis=axes, keepdims=True, dtype=np.float64) / count).astype(d.dtype)
        scale = 1.0 / count
    elif kind == "max":
        out = d.max(axis=axes, keepdims=True)
    else:
        raise TensorError(f"unknown reduction {kind!r}")
    kept_shape = out.shape
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(d.shape) if i not in axes))

    def bw(g):
        g = g.reshape(kept_shape)
        if kind == "sum":
            return (np.broadcast_to(g, d.shape).astype(d.dtype),)
        if kind == "mean":
            return (np.broadcast_to(g * scale, d.shape).astype(d.dtype),)
        mask = d == out.reshape(kept_shape)
        mask = mask / mask.sum(axis=axes, keepdims=True)
        return ((g * mask).astype(d.dtype),)

    return make_result(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise TensorError(str(exc)) from None

    def bw(g):
        return (g.reshape(src),)

    return make_result(out, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return make_result(out, (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out, copy=True) if np.ndim(out) else out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise TensorError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b`` (mask is not differentiable)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def bw(g):
        return (unbroadcast(np.where(mask, g, 0), a.shape), unbroadcast(np.where(mask, 0, g), b.shape))

    return make_result(out.astype(np.result_type(a.data, b.data)), (a, b), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The recorded graph is released afterwards; calling backward again on
    the same loss raises.
    """
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("loss is detached from any tracked tensor")
    if loss.is_leaf:
        _accumulate(loss, np.ones_like(loss.data))
        return

    # collect the reachable part of the tape
    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._node.parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._node.seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        node = t._node
        t._node = None
        t.requires_grad = False  # released: no longer part of any graph
        if g is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if p._node is None:
                _accumulate(p, pg)
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if g.shape != leaf.shape:
        g = unbroadcast(g, leaf.shape)
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.data.dtype, copy=True)
    else:
        leaf.grad += g


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Both routes run in float64: ``x`` is promoted and numpy promotion carries
    that through ``f``. A non-scalar output is summed. Error per coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    base = np.array(_data(x), dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    backward(out if out.size == 1 else out.sum())
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(np.sum(f(Tensor(base.copy())).data, dtype=np.float64))
            flat[i] = orig - step
            lo = float(np.sum(f(Tensor(base.copy())).data, dtype=np.float64))
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * step)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
