"""Dense numpy tensors with reverse-mode differentiation.

Every differentiable op is a plain function returning a new :class:`Tensor`;
the result remembers its parents and a closure mapping the upstream gradient
to one gradient per parent.  :func:`backward` walks the recorded nodes in
exact reverse execution order.

Broadcasting is limited to trailing-axis expansion: a binary op accepts
operands whose shapes are equal, or where one shape is a suffix of the other.
Anything else needs an explicit reshape.
"""
from __future__ import annotations

import contextlib
import hashlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, StateError

STANDARD = np.float32
WIDE = np.float64

_seq = itertools.count()
_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (teacher passes, evaluation)."""
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(WIDE)
        if not np.all(np.isfinite(arr)):
            raise NumericError("leaf tensor holds non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self._seq = -1
        self._spent = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.op = "leaf"
        t._parents = ()
        t._backward = None
        t._seq = -1
        t._spent = False
        return t

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def astype(self, dtype) -> "Tensor":
        return cast(self, dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ConfigError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None or x.dtype == dtype else cast(x, dtype)
    return Tensor(x, dtype=dtype)


def _const(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; the building block for custom ops.

    ``backward_fn(g)`` must return one gradient (or None) per parent, each with
    the parent's exact shape.
    """
    # a sum is non-finite iff some element is (barring overflow, which is reported too)
    if data.size and not np.isfinite(data.sum()):
        raise NumericError(f"{op}: non-finite result")
    need = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(np.ascontiguousarray(data), need)
    if need:
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def backward(loss: Tensor) -> list[str]:
    """Populate ``grad`` on every leaf reachable from scalar ``loss``.

    Leaf gradients accumulate across calls on different graphs; a given graph
    is consumed by one call.  Returns the op names in visiting order.
    """
    if loss.size != 1:
        raise StateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise StateError("graph already consumed by a previous backward call")
    if loss._backward is None:
        raise StateError("loss was not produced by recorded ops")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    visited = []
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        visited.append(node.op)
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            if gp.shape != p.shape:
                raise StateError(f"{node.op}: gradient shape {gp.shape} != operand shape {p.shape}")
            if p._backward is None:
                p.grad = np.array(gp, dtype=p.dtype) if p.grad is None else p.grad + gp
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
        node._backward = None
        node._parents = ()
        node._spent = True
    loss._spent = True
    return visited


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ConfigError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) < len(long) and long[len(long) - len(short):] == short:
        return
    raise ConfigError(f"{op}: shapes {sa} and {sb} differ beyond trailing-axis expansion")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


def cast(x: Tensor, dtype) -> Tensor:
    src = x.dtype
    return make_op("cast", x.data.astype(dtype), (x,), lambda g: (g.astype(src),))


def add(a, b) -> Tensor:
    a = _const(a, getattr(b, "dtype", None))
    b = _const(b, a.dtype)
    _trailing(a, b, "add")
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _const(a, getattr(b, "dtype", None))
    b = _const(b, a.dtype)
    _trailing(a, b, "sub")
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _const(a, getattr(b, "dtype", None))
    b = _const(b, a.dtype)
    _trailing(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_op("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` (shared weights) or batched with equal leading axes."""
    if a.dtype != b.dtype:
        raise ConfigError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim == 2:
        def bw(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    elif a.shape[:-2] == b.shape[:-2]:
        def bw(g):
            return (g @ _swap(b.data) if a.requires_grad else None,
                    _swap(a.data) @ g if b.requires_grad else None)
    else:
        raise ConfigError(f"matmul: batch axes {a.shape[:-2]} and {b.shape[:-2]} differ")
    return make_op("matmul", a.data @ b.data, (a, b), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form."""
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    a = x.dtype.type(0.044715)
    d = x.data
    t = np.tanh(c * (d + a * d * d * d))
    out = 0.5 * d * (1 + t)

    def bw(g):
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * c * (1 + 3 * a * d * d)),)

    return make_op("gelu", out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", y, (x,), bw)


def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return make_op("sum", out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size // max(out.size, 1) if x.size else 1

    def bw(g):
        return (np.array(_expand(g, x.shape, axis, keepdims)) / n,)

    return make_op("mean", out, (x,), bw)


def variance(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Population variance along ``axis``."""
    mu = x.data.mean(axis=axis, keepdims=True)
    d = x.data - mu
    out = np.asarray((d * d).mean(axis=axis, keepdims=keepdims))
    n = x.shape[axis]

    def bw(g):
        return (2.0 * d * _expand(g, x.shape, axis, keepdims) / n,)

    return make_op("variance", out, (x,), bw)


def normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Zero-mean, unit-variance standardization along ``axis`` without parameters.

    With ``eps == 0`` a zero-variance slice is an error instead of a division by zero.
    """
    # statistics in float64: float32 cancellation leaves ~1e-5 of residual mean on offset inputs
    d = x.data.astype(np.float64)
    d = d - d.mean(axis=axis, keepdims=True)
    var = (d * d).mean(axis=axis, keepdims=True)
    if eps <= 0 and np.any(var <= 0):
        raise NumericError(f"normalize: zero variance along axis {axis}")
    s64 = np.sqrt(var + eps)
    y = (d / s64).astype(x.data.dtype)
    s = s64.astype(x.data.dtype)

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return ((g - gm - y * gy) / s,)

    return make_op("normalize", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return add(mul(normalize(x, -1, eps), gain), bias)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ConfigError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(f"embedding: id outside [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_op("embedding", table.data[ids], (table,), bw)


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` by an integer index set."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise ConfigError(f"gather: index outside [0, {x.shape[axis]})")

    def bw(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_op("gather", np.take(x.data, index, axis=axis), (x,), bw)


def mask_rows(x: Tensor, rows, value: Tensor) -> Tensor:
    """Replace the feature rows of ``x[..., H]`` selected by boolean ``rows`` with ``value[H]``."""
    rows = np.asarray(rows, dtype=bool)
    if rows.shape != x.shape[:-1] or value.shape != x.shape[-1:]:
        raise ConfigError(f"mask_rows: rows {rows.shape} / value {value.shape} do not fit {x.shape}")
    _trailing(x, value, "mask_rows")
    out = x.data.copy()
    out[rows] = value.data

    def bw(g):
        gx = g.copy()
        gx[rows] = 0
        return gx, g[rows].sum(axis=0)

    return make_op("mask_rows", out, (x, value), bw)


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D convolution, channels last: ``x[B, N, Cin] * w[Cout, Cin, k] -> [B, T, Cout]``."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ConfigError(f"conv1d: shapes {x.shape} and {w.shape} do not conform")
    B, N, Cin = x.shape
    Cout, _, k = w.shape
    if N < k:
        raise ConfigError(f"conv1d: input length {N} shorter than kernel {k}")
    T = (N - k) // stride + 1
    windows = sliding_window_view(x.data, k, axis=1)[:, : (T - 1) * stride + 1: stride]
    cols = windows.reshape(B * T, Cin * k)
    wmat = w.data.reshape(Cout, Cin * k)
    out = (cols @ wmat.T).reshape(B, T, Cout)

    def bw(g):
        g2 = g.reshape(B * T, Cout)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, T, Cin, k)
            gx = np.zeros_like(x.data)
            end = (T - 1) * stride + 1
            for j in range(k):
                gx[:, j: j + end: stride] += gcols[:, :, :, j]
        return gx, gw

    return make_op("conv1d", out, (x, w), bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"reshape: {exc}") from None
    return make_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ConfigError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return make_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def drop_path(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Stochastic depth: zero a residual branch for whole samples along axis 0."""
    if rate <= 0:
        return x
    keep = (rng.random(x.shape[0]) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    keep = keep.reshape((-1,) + (1,) * (x.ndim - 1))
    return make_op("drop_path", x.data * keep, (x,), lambda g: (g * keep,))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    if eps <= 0:
        raise ConfigError("grad_check: eps must be positive")
    base = np.array(x.data)
    leaf = Tensor(base, requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("grad_check: non-finite analytic gradient")
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            plus = base.copy()
            plus.flat[i] += eps
            minus = base.copy()
            minus.flat[i] -= eps
            hi = f(Tensor._wrap(plus, False)).item()
            lo = f(Tensor._wrap(minus, False)).item()
            numeric = (hi - lo) / (plus.flat[i] - minus.flat[i])
            if not np.isfinite(numeric):
                raise NumericError(f"grad_check: non-finite numeric gradient at {i}")
            a = float(analytic.flat[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


class Streams:
    """Named, splittable counter-based random streams.

    ``Streams(seed).generator("mask", step)`` always yields the same Philox
    generator for the same seed and name path, independent of what else was drawn.
    """

    def __init__(self, seed: int, prefix: tuple = ()):
        self.seed = int(seed)
        self.prefix = tuple(prefix)

    def child(self, *names) -> "Streams":
        return Streams(self.seed, self.prefix + tuple(names))

    def key(self, *names) -> int:
        path = "/".join(str(n) for n in (self.seed,) + self.prefix + tuple(names))
        return int.from_bytes(hashlib.blake2b(path.encode(), digest_size=16).digest(), "little")

    def generator(self, *names) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(*names)))
