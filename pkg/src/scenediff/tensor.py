"""Dense float64 arrays with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient and recording is enabled, the result remembers its parents and a
vector-Jacobian product closure; :func:`backward` walks that graph from a
scalar root.

Subgradients at kinks (clip, abs, min/max, relu) are zero on the clipped or
losing side, and ties go to the first operand / first index.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._vjp = None
        self._op = "leaf"

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators
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

    def __pow__(self, other):
        return power(self, other)

    def __rpow__(self, other):
        return power(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, dims=None, keepdims=False):
        return reduce("sum", self, dims, keepdims)

    def mean(self, dims=None, keepdims=False):
        return reduce("mean", self, dims, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Sequence, vjp: Callable, op: str = "custom") -> Tensor:
    """Create a result tensor and, when needed, attach it to the graph.

    ``vjp(g)`` receives the upstream gradient (same shape as ``data``) and
    returns one gradient array (or None) per parent.
    """
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED:
        tracked = tuple(p for p in parents if isinstance(p, Tensor))
        if any(p.requires_grad for p in tracked):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
    return out


def broadcast_shape(*shapes: Sequence[int]) -> tuple:
    try:
        return tuple(np.broadcast_shapes(*[tuple(s) for s in shapes]))
    except ValueError:
        raise ShapeError(
            "operands could not be broadcast together: "
            + " and ".join(str(tuple(s)) for s in shapes)
        ) from None


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, da, db, op):
    a = as_tensor(a)
    b = as_tensor(b)
    shape = broadcast_shape(a.shape, b.shape)
    out = fwd(a.data, b.data)

    def vjp(g):
        ga = unbroadcast(da(g, a.data, b.data, out), a.shape) if a.requires_grad else None
        gb = unbroadcast(db(g, a.data, b.data, out), b.shape) if b.requires_grad else None
        return ga, gb

    assert out.shape == shape
    return record(out, (a, b), vjp, op)


def _unary(a, fwd, d, op):
    a = as_tensor(a)
    out = fwd(a.data)
    return record(out, (a,), lambda g: (d(g, a.data, out),), op)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g, "add")


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g, "sub")


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * x / (y * y),
        "div",
    )


def neg(a):
    return _unary(a, np.negative, lambda g, x, o: -g, "neg")


def absolute(a):
    return _unary(a, np.abs, lambda g, x, o: g * np.sign(x), "abs")


def clip_min(a, lo):
    """max(a, lo) with zero gradient where a <= lo."""
    a = as_tensor(a)
    lo_arr = as_tensor(lo)
    if lo_arr.requires_grad:
        return maximum(a, lo_arr)
    mask = a.data > lo_arr.data
    out = np.where(mask, a.data, lo_arr.data)
    out = np.broadcast_to(out, broadcast_shape(a.shape, lo_arr.shape)).copy()
    return record(out, (a,), lambda g: (unbroadcast(g * mask, a.shape),), "clip_min")


def clip_max(a, hi):
    """min(a, hi) with zero gradient where a >= hi."""
    a = as_tensor(a)
    hi_arr = as_tensor(hi)
    if hi_arr.requires_grad:
        return minimum(a, hi_arr)
    mask = a.data < hi_arr.data
    out = np.where(mask, a.data, hi_arr.data)
    out = np.broadcast_to(out, broadcast_shape(a.shape, hi_arr.shape)).copy()
    return record(out, (a,), lambda g: (unbroadcast(g * mask, a.shape),), "clip_max")


def clip(a, lo=None, hi=None):
    if lo is not None:
        a = clip_min(a, lo)
    if hi is not None:
        a = clip_max(a, hi)
    return as_tensor(a)


def sin(a):
    return _unary(a, np.sin, lambda g, x, o: g * np.cos(x), "sin")


def cos(a):
    return _unary(a, np.cos, lambda g, x, o: -g * np.sin(x), "cos")


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, o: g * 0.5 / o, "sqrt")


def exp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o, "exp")


def log(a):
    return _unary(a, np.log, lambda g, x, o: g / x, "log")


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o), "tanh")


def _sigmoid_np(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid_np, lambda g, x, o: g * o * (1.0 - o), "sigmoid")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0), "relu")


def fmod(a, b):
    return _binary(
        a, b, np.fmod,
        lambda g, x, y, o: g,
        lambda g, x, y, o: -g * np.trunc(x / y),
        "fmod",
    )


def minimum(a, b):
    return _binary(
        a, b, np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (y < x),
        "minimum",
    )


def maximum(a, b):
    return _binary(
        a, b, np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (y > x),
        "maximum",
    )


def power(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if not b.requires_grad and b.size == 1:
        e = float(b.data.reshape(-1)[0])
        if e == 2.0:
            return _unary(a, np.square, lambda g, x, o: 2.0 * g * x, "square")
        return _unary(a, lambda x: np.power(x, e), lambda g, x, o: g * e * np.power(x, e - 1.0), "pow")

    def db(g, x, y, o):
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)
        return g * o * lg

    return _binary(a, b, np.power, lambda g, x, y, o: g * y * np.power(x, y - 1.0), db, "pow")


def where(cond, a, b):
    """Select ``a`` where ``cond`` is true, else ``b``. ``cond`` is never differentiated."""
    c = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    c = c.astype(bool)
    a = as_tensor(a)
    b = as_tensor(b)
    shape = broadcast_shape(c.shape, a.shape, b.shape)
    out = np.where(c, a.data, b.data)

    def vjp(g):
        ga = unbroadcast(np.where(c, g, 0.0), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(c, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    assert out.shape == shape
    return record(out, (a, b), vjp, "where")


def wrap_angle(a):
    """Wrap to (-pi, pi]; derivative 1 away from the seam."""
    def fwd(x):
        y = np.mod(x + math.pi, 2.0 * math.pi) - math.pi
        y = np.where(y == -math.pi, math.pi, y)
        return np.where((x > -math.pi) & (x <= math.pi), x, y)

    return _unary(a, fwd, lambda g, x, o: g, "wrap")


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "abs": absolute,
    "clip_min": clip_min, "clip_max": clip_max, "sin": sin, "cos": cos, "sqrt": sqrt,
    "sigmoid": sigmoid, "fmod": fmod, "where": where, "minimum": minimum,
    "maximum": maximum, "pow": power,
}


def elementwise(kind: str, a, b=None, c=None):
    """Dispatch by name; ``where`` takes (mask, a, b)."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}; known: {sorted(ELEMENTWISE)}") from None
    if kind == "where":
        return fn(a, b, c)
    if b is None:
        return fn(a)
    return fn(a, b)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    batch = broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    assert out.shape[:-2] == batch
    return record(out, (a, b), vjp, "matmul")


# ---------------------------------------------------------------- reductions

def _norm_dims(dims, ndim) -> tuple:
    if dims is None:
        return tuple(range(ndim))
    if isinstance(dims, int):
        dims = (dims,)
    out = []
    for d in dims:
        if not -ndim <= d < ndim:
            raise ShapeError(f"dim {d} out of range for a {ndim}-d tensor")
        out.append(d % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"reduction dims must be distinct, got {tuple(dims)}")
    return tuple(sorted(out))


def _argext_mask(x: np.ndarray, dims: tuple, use_min: bool) -> np.ndarray:
    """One-hot mask of the first arg-min/arg-max over ``dims``."""
    keep = [i for i in range(x.ndim) if i not in dims]
    perm = keep + list(dims)
    xt = np.transpose(x, perm)
    lead = xt.shape[: len(keep)]
    flat = xt.reshape(lead + (-1,))
    idx = np.argmin(flat, axis=-1) if use_min else np.argmax(flat, axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot = onehot.reshape(xt.shape)
    return np.transpose(onehot, np.argsort(perm))


def reduce(kind: str, a, dims=None, keepdims: bool = False):
    a = as_tensor(a)
    dims = _norm_dims(dims, a.ndim)
    for d in dims:
        if a.shape[d] == 0:
            raise ShapeError(f"empty {kind} reduction over zero-extent dim {d} of {a.shape}")
    x = a.data
    if kind == "sum":
        out = x.sum(axis=dims, keepdims=True)
    elif kind == "mean":
        out = x.mean(axis=dims, keepdims=True)
    elif kind == "min":
        out = x.min(axis=dims, keepdims=True)
    elif kind == "max":
        out = x.max(axis=dims, keepdims=True)
    elif kind == "norm2":
        out = np.sqrt(np.square(x).sum(axis=dims, keepdims=True))
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    count = int(np.prod([x.shape[d] for d in dims])) if dims else 1

    def vjp(g):
        if kind == "sum":
            gx = np.broadcast_to(g, x.shape)
        elif kind == "mean":
            gx = np.broadcast_to(g / count, x.shape)
        elif kind in ("min", "max"):
            gx = g * _argext_mask(x, dims, kind == "min")
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                gx = np.where(out > 0, g * x / np.where(out > 0, out, 1.0), 0.0)
        return (np.array(gx, dtype=np.float64),)

    res = record(out, (a,), vjp, kind)
    if not keepdims:
        res = reshape(res, tuple(n for i, n in enumerate(a.shape) if i not in dims))
    return res


def sum_(a, dims=None, keepdims=False):
    return reduce("sum", a, dims, keepdims)


def mean(a, dims=None, keepdims=False):
    return reduce("mean", a, dims, keepdims)


def amin(a, dims=None, keepdims=False):
    return reduce("min", a, dims, keepdims)


def amax(a, dims=None, keepdims=False):
    return reduce("max", a, dims, keepdims)


def norm2(a, dims=None, keepdims=False):
    return reduce("norm2", a, dims, keepdims)


def softmax(a, dim: int = -1, mask=None):
    """Max-shifted softmax.  With ``mask``, masked entries get weight 0 and
    rows with no unmasked entry return all zeros."""
    a = as_tensor(a)
    x = a.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax input contains non-finite values")
    if mask is None:
        z = x - x.max(axis=dim, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=dim, keepdims=True)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        shifted = np.where(m, x, -np.inf)
        top = shifted.max(axis=dim, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(m, np.exp(np.where(m, x - top, 0.0)), 0.0)
        s = e.sum(axis=dim, keepdims=True)
        out = e / np.where(s > 0, s, 1.0)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=dim, keepdims=True)),)

    return record(out, (a,), vjp, "softmax")


def logsumexp(a, dim: int = -1, mask=None):
    """log(sum(exp(a))) along ``dim``; a fully masked row yields 0."""
    a = as_tensor(a)
    x = a.data
    m = None if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    xs = x if m is None else np.where(m, x, -np.inf)
    top = xs.max(axis=dim, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(xs - top)
    s = e.sum(axis=dim, keepdims=True)
    empty = s <= 0
    out = np.where(empty, 0.0, np.log(np.where(empty, 1.0, s)) + top)
    w = np.where(empty, 0.0, e / np.where(empty, 1.0, s))

    def vjp(g):
        return (g * w,)

    res = record(out, (a,), vjp, "logsumexp")
    return squeeze(res, dim)


def softmin(a, dim: int = -1, temperature: float = 1.0, mask=None):
    """Smooth minimum  -t * log(sum(exp(-a / t)))."""
    return neg(logsumexp(div(a, -temperature), dim, mask)) * temperature


# ---------------------------------------------------------------- structure

def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def expand(a, shape):
    a = as_tensor(a)
    shape = broadcast_shape(a.shape, shape)
    out = np.broadcast_to(a.data, shape).copy()
    return record(out, (a,), lambda g: (unbroadcast(g, a.shape),), "expand")


def squeeze(a, dim):
    a = as_tensor(a)
    d = dim % a.ndim if a.ndim else 0
    if a.shape[d] != 1:
        raise ShapeError(f"cannot squeeze dim {dim} of shape {a.shape}")
    return reshape(a, a.shape[:d] + a.shape[d + 1:])


def unsqueeze(a, dim):
    a = as_tensor(a)
    d = dim if dim >= 0 else a.ndim + 1 + dim
    return reshape(a, a.shape[:d] + (1,) + a.shape[d:])


def concat(tensors: Sequence, dim: int = 0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    nd = ts[0].ndim
    if not -nd <= dim < nd:
        raise ShapeError(f"dim {dim} out of range for a {nd}-d tensor")
    d = dim % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != d):
            raise ShapeError(f"concat shapes disagree off dim {dim}: {ts[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=d)
    bounds = np.cumsum([0] + [t.shape[d] for t in ts])

    def vjp(g):
        res = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[d] = slice(lo, hi)
                res.append(g[tuple(sl)])
            else:
                res.append(None)
        return tuple(res)

    return record(out, ts, vjp, "concat")


def stack(tensors: Sequence, dim: int = 0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of an empty list")
    nd = ts[0].ndim + 1
    d = dim % nd
    return concat([unsqueeze(t, d) for t in ts], d)


def getitem(a, idx):
    """Basic and integer-array indexing; gradients scatter back with add.at."""
    a = as_tensor(a)
    out = a.data[idx]
    advanced = _has_advanced(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return record(np.array(out, dtype=np.float64), (a,), vjp, "getitem")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def slice_(a, dim: int, start: int, stop: int):
    a = as_tensor(a)
    if not -a.ndim <= dim < a.ndim:
        raise ShapeError(f"dim {dim} out of range for a {a.ndim}-d tensor")
    sl = [slice(None)] * a.ndim
    sl[dim % a.ndim] = slice(start, stop)
    return getitem(a, tuple(sl))


def take(a, indices, dim: int = 0):
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[dim % a.ndim] = np.asarray(indices, dtype=np.int64)
    return getitem(a, tuple(sl))


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5):
    """Normalize over the last dim, then scale and shift."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gain_t = None if gain is None else as_tensor(gain)
    bias_t = None if bias is None else as_tensor(bias)
    out = xhat if gain_t is None else xhat * gain_t.data
    if bias_t is not None:
        out = out + bias_t.data
    n = x.shape[-1]

    def vjp(g):
        gh = g if gain_t is None else g * gain_t.data
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        gg = unbroadcast(g * xhat, gain_t.shape) if gain_t is not None and gain_t.requires_grad else None
        gb = unbroadcast(g, bias_t.shape) if bias_t is not None and bias_t.requires_grad else None
        return gx if a.requires_grad else None, gg, gb

    parents = (a, gain_t if gain_t is not None else Tensor(0.0), bias_t if bias_t is not None else Tensor(0.0))
    return record(out, parents, vjp, "layer_norm")


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list:
    order = []
    seen = set()
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
        for p in reversed(node._parents):
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed=None) -> dict:
    """Reverse pass from a scalar root.

    Returns a dict mapping every tracked leaf tensor to its gradient array
    (also stored on ``leaf.grad``).  Fan-out contributions are summed in a
    fixed order, so repeated calls give bitwise-identical results.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward needs a Tensor root")
    if seed is None and root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward root is not connected to any tracked tensor")
    grads = {id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)}
    leaves = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            node.grad = g
            continue
        for p, gp in zip(node._parents, node._vjp(g)):
            if gp is None or not isinstance(p, Tensor) or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64)
            if gp.shape != p.shape:
                gp = unbroadcast(gp, p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = gp.copy() if prev is None else prev + gp
    return leaves


def grad(fn: Callable, *inputs: np.ndarray):
    """Gradients of scalar ``fn(*tensors)`` w.r.t. each input array."""
    ts = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = as_tensor(fn(*ts))
    gm = backward(out) if out.requires_grad else {}
    res = [gm.get(t, np.zeros_like(t.data)) for t in ts]
    return out.item(), res


def grad_check(f: Callable, x, eps: float = 1e-6, coords: Iterable[int] | None = None, floor: float = 1e-8) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``coords`` restricts the check to selected flat indices of ``x``.  The
    error is relative to ``max(floor, |numeric|)``; raise ``floor`` above the
    finite-difference round-off when true gradients may be exactly zero.
    """
    x = np.array(x, dtype=np.float64)
    _, (g,) = grad(f, x)
    g = g.reshape(-1)
    flat = x.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            fp = f(Tensor(x)).item()
            flat[i] = old - eps
            fm = f(Tensor(x)).item()
            flat[i] = old
            num = (fp - fm) / (2.0 * eps)
            err = abs(g[i] - num) / max(floor, abs(num))
            worst = max(worst, err)
    return worst
