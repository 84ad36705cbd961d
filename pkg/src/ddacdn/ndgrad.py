"""Minimal dense tensors with tape-based reverse-mode differentiation.

Operations record a node on the active :class:`Graph` whenever at least one
operand is tracked (a leaf created with ``requires_grad=True`` or the output
of an earlier recorded op). Outside a graph context every op is a plain
float64 numpy computation.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Graph():
    ...     loss = (x * x).sum()
    ...     grads = backward(loss)
    >>> grads.of(x)
    array([2., 4., 6.])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

__all__ = [
    "Tensor", "Graph", "GradientMap", "ShapeError", "DomainError", "GraphError",
    "backward", "grad_check", "active_graph", "apply_primitive",
    "add", "sub", "mul", "div", "neg", "matmul", "conv2d", "sigmoid", "softplus",
    "exp", "log", "power", "relu", "maximum", "minimum", "tsum", "tmean", "tmax",
    "reshape", "transpose", "concat", "getitem", "global_avg_pool",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's shape rule."""


class DomainError(ValueError):
    """Operand values fall outside a primitive's mathematical domain."""


class GraphError(RuntimeError):
    """Differentiation requested on a tensor outside any active graph."""


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("kind", "inputs", "backward", "shape")

    def __init__(self, kind, inputs, backward, shape):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.shape = shape


class Graph:
    """Append-only tape of recorded primitives.

    Node ids are list indices, so they increase strictly with creation order
    and every edge points from a larger id to a smaller one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Graph:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _node_of(self, t: Tensor) -> int | None:
        if t.graph is self:
            return t.node
        if t.requires_grad:
            t.graph = self
            t.node = self._append(_Node("leaf", (), None, t.data.shape))
            return t.node
        return None


class Tensor:
    """Dense float64 array, optionally tracked by the active graph."""

    __slots__ = ("data", "requires_grad", "graph", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.graph: Graph | None = None
        self.node: int | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.graph = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return neg(self)
    def __pow__(self, c): return power(self, c)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def max(self, axis=None, keepdims=False): return tmax(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)
    def exp(self): return exp(self)
    def log(self): return log(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor],
            back: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    result = Tensor._wrap(out)
    g = active_graph()
    if g is None:
        return result
    ids = tuple(g._node_of(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    result.graph = g
    result.node = g._append(_Node(kind, ids, back, out.shape))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("maximum", a, b)
    ad, bd = a.data, b.data
    pick = ad >= bd
    return _record("maximum", np.where(pick, ad, bd), (a, b),
                   lambda g: (_unbroadcast(g * pick, ad.shape),
                              _unbroadcast(g * ~pick, bd.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("minimum", a, b)
    ad, bd = a.data, b.data
    pick = ad <= bd
    return _record("minimum", np.where(pick, ad, bd), (a, b),
                   lambda g: (_unbroadcast(g * pick, ad.shape),
                              _unbroadcast(g * ~pick, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not (n,k)x(k,m)")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# --- elementwise unary ------------------------------------------------------

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)) evaluated as max(x, 0) + log1p(exp(-|x|))."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record("softplus", out, (a,), lambda g: (g * expit(x),))


def bce_with_logits(a, target) -> Tensor:
    """max(x, 0) - x*p + log1p(exp(-|x|)); differentiable in the logits only."""
    a = _as_tensor(a)
    x = a.data
    p = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    out = np.maximum(x, 0.0) - x * p + np.log1p(np.exp(-np.abs(x)))
    if out.shape != x.shape:
        raise ShapeError(f"bce_with_logits: targets {p.shape} do not fit logits {x.shape}")
    return _record("bce_with_logits", out, (a,), lambda g: (g * (expit(x) - p),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive operand (min {x.min()!r})")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def power(a, c: float) -> Tensor:
    """``a ** c`` for a constant real exponent."""
    a = _as_tensor(a)
    c = float(c)
    x = a.data
    if c != int(c) and np.any(x < 0):
        raise DomainError(f"pow: negative base with non-integer exponent {c}")
    out = x ** c

    def back(g):
        if c == 0.0:
            return (np.zeros_like(x),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = c * x ** (c - 1.0)
        d = np.where(x == 0, 1.0 if c == 1 else 0.0, d)
        return (g * d,)

    return _record("pow", out, (a,), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


# --- reductions -------------------------------------------------------------

def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape, axes = a.shape, _axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))
    return _record("sum", out, (a,), lambda g: (_expand(g, shape, axes, keepdims).copy(),))


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape, axes = a.shape, _axes(axis, a.ndim)
    n = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))
    return _record("mean", out, (a,), lambda g: (_expand(g, shape, axes, keepdims) / n,))


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal element."""
    a = _as_tensor(a)
    x = a.data
    if axis is None:
        flat = np.argmax(x)
        out = np.asarray(x.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * x.ndim)

        def back(g):
            d = np.zeros(x.size)
            d[flat] = np.asarray(g).reshape(-1)[0]
            return (d.reshape(x.shape),)

        return _record("max", out, (a,), back)
    if not isinstance(axis, int):
        raise ShapeError("max: only a single axis or all axes are supported")
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    out = np.take_along_axis(x, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def back(g):
        d = np.zeros_like(x)
        gg = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(d, idx, gg, axis=ax)
        return (d,)

    return _record("max", out, (a,), back)


def global_avg_pool(a) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N,C,H,W), got {a.shape}")
    shape = a.shape
    hw = shape[2] * shape[3]
    out = a.data.mean(axis=(2, 3))
    return _record("global_avg_pool", out, (a,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / hw, shape).copy(),))


# --- shape ------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data[index])
    if out.base is not None:
        out = out.copy()

    def back(g):
        d = np.zeros(shape)
        np.add.at(d, index, g)
        return (d,)

    return _record("getitem", out, (a,), back)


# --- convolution ------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(n, c, k, k, ho, wo),
                      strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero "same" padding applied before the stride.

    Args:
        x: input of shape (N, C, H, W).
        w: kernel of shape (O, C, k, k) with odd k.
        b: optional bias of shape (O,).
        stride: spatial step; output size is ceil(H / stride).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} and kernel {w.shape} do not conform")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.ascontiguousarray(_windows(xp, k, stride, ho, wo)).reshape(n, c * k * k, ho * wo)
    wmat = w.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]
    xshape, wshape = x.shape, w.shape

    def back(g):
        gm = g.reshape(n, o, ho * wo)
        gw = np.einsum("nop,nqp->oq", gm, cols).reshape(wshape)
        gcols = np.matmul(wmat.T, gm).reshape(n, c, k, k, ho, wo)
        gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                    j:j + stride * (wo - 1) + 1:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", out, inputs, back)


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "conv2d": conv2d, "sigmoid": sigmoid, "exp": exp, "log": log, "pow": power,
    "sum": tsum, "mean": tmean, "max": tmax, "relu": relu, "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis), "global_avg_pool": global_avg_pool,
    "neg": neg, "softplus": softplus, "bce_with_logits": bce_with_logits,
    "maximum": maximum, "minimum": minimum,
    "transpose": transpose, "getitem": getitem,
}


def apply_primitive(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("conv2d", x, w, stride=2)``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **kwargs)


# --- differentiation --------------------------------------------------------

class GradientMap(dict):
    """Node id -> gradient Tensor, for the loss node and every reachable leaf."""

    def of(self, t: Tensor) -> np.ndarray:
        if t.node is not None and t.node in self:
            return self[t.node].data
        return np.zeros(t.shape)


def backward(loss: Tensor) -> GradientMap:
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    g = active_graph()
    if g is None or loss.graph is not g or loss.node is None:
        raise GraphError("backward: loss is not recorded on the active graph")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    result = GradientMap()
    for nid in range(loss.node, -1, -1):
        gout = grads.pop(nid, None)
        if gout is None:
            continue
        node = g.nodes[nid]
        if node.backward is None:
            result[nid] = Tensor._wrap(gout)
            continue
        if nid == loss.node:
            result[nid] = Tensor._wrap(gout.copy())
        for src, gin in zip(node.inputs, node.backward(gout)):
            if src is None or gin is None:
                continue
            prev = grads.get(src)
            grads[src] = gin if prev is None else prev + gin
    return result


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between backward gradients and central differences.

    Args:
        f: maps a Tensor shaped like ``x`` to a scalar Tensor.
        x: evaluation point.
        eps: finite-difference step.
        coords: optional flat coordinate subset to probe (default: all).

    Returns:
        max over probed coordinates of |a - n| / max(1e-8, |a| + |n|).
    """
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with Graph():
        analytic = backward(f(leaf)).of(leaf).reshape(-1)
    probe = range(base.size) if coords is None else coords
    worst = 0.0
    flat = base.reshape(-1)
    for i in probe:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(base.shape))).item()
        fm = f(Tensor(xm.reshape(base.shape))).item()
        num = (fp - fm) / (2 * eps)
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
