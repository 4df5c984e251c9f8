"""Minimal reverse-mode automatic differentiation over numpy arrays.

Graphs are built eagerly by the forward ops below and consumed by
:func:`backward`; every forward rebuilds its graph.  Broadcasting follows the
numpy rule (trailing-dimension alignment, size-1 expansion), and each adjoint
sums the gradient back down to its input's shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import math

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, NonScalarLossError, ShapeMismatchError, StaleGraphError

LAYER_NORM_EPS = 1e-5
CHECK_FINITE = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Array with an optional gradient and a link to the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.op = "leaf"
        self.consumed = False

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap a forward result; ``backward_fn(g)`` returns one gradient per parent."""
    # one reduction catches any nan/inf; an overflowing sum falls back to the elementwise test
    if CHECK_FINITE and not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    """Promote non-tensor operands to the dtype of the tensor operand."""
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
                   "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
                   "div")


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


# elementwise unary -------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return make_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)

    def bwd(g):
        e = np.exp(-np.abs(x))
        return (g * np.where(x >= 0, 1.0, e) / (1.0 + e),)

    return make_op(out, (a,), bwd, "softplus")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (cdf + x * pdf),)

    return make_op(out, (a,), bwd, "gelu")


# linear algebra and shape ------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_op(out, (a, b), bwd, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; the adjoint scatters with ``np.add.at``."""
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(np.array(out, copy=True), (a,), bwd, "slice")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return make_op(np.array(out, copy=True), (a,), bwd, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError(f"concat: shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))]

    return make_op(out, tensors, bwd, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return make_op(out, tensors,
                   lambda g: [np.take(g, i, axis=axis) for i in range(len(tensors))], "stack")


# reductions --------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(out), (a,), bwd, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return make_op(np.asarray(out), (a,), bwd, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bwd(g):
        gi = g * out
        gi -= out * gi.sum(axis=axis, keepdims=True)
        return (gi,)

    return make_op(out, (a,), bwd, "softmax")


def layer_norm(a: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over ``axis`` then apply the optional affine ``gamma``/``beta``."""
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def norm_bwd(g):
        return (inv * (g - g.mean(axis=axis, keepdims=True)
                       - xhat * (g * xhat).mean(axis=axis, keepdims=True)),)

    out = make_op(xhat, (a,), norm_bwd, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# graph traversal ---------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every requires-grad leaf.

    The graph is released afterwards; calling again on it raises
    :class:`StaleGraphError`.
    """
    if loss.size != 1 and grad is None:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise StaleGraphError("graph already consumed by a previous backward; rebuild the forward")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node.consumed:
            raise StaleGraphError(f"graph node '{node.op}' was consumed by a previous backward")
    grads = {id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.backward_fn is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node.consumed = True
        node.backward_fn = None
        node.parents = ()


# finite-difference checking ---------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    tol: float
    name: str = ""
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        state = "ok" if self.passed else "FAIL"
        return (f"{self.name or 'gradcheck'}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}) "
                f"{state}; worst input {self.worst_input} at {self.worst_index}")


def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
               tol: float = 1e-5, name: str = "", max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*tensors)`` with central differences.

    ``max_coords`` subsamples coordinates per input (all by default).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in arrays]
    out = f(*leaves)
    backward(out)
    analytic = [np.zeros_like(x) if t.grad is None else t.grad for x, t in zip(arrays, leaves)]

    def value(xs):
        return float(f(*[Tensor(x) for x in xs]).data.sum())

    worst = (-1.0, -1, (), 0.0, 0.0)
    per_input = []
    for k, x in enumerate(arrays):
        coords = list(np.ndindex(x.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        local = 0.0
        for c in coords:
            orig = x[c]
            x[c] = orig + h
            fp = value(arrays)
            x[c] = orig - h
            fm = value(arrays)
            x[c] = orig
            num = (fp - fm) / (2.0 * h)
            err = float(rel_error(analytic[k][c], num))
            local = max(local, err)
            if err > worst[0]:
                worst = (err, k, c, float(analytic[k][c]), num)
        per_input.append(local)
    return GradCheckReport(max(worst[0], 0.0), worst[1], worst[2], worst[3], worst[4], tol, name, per_input)
