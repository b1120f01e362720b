"""Dense tensors with reverse-mode automatic differentiation.

Every op returns a fresh :class:`Tensor`; when any input requires a gradient the
output records its parents and a backward rule mapping the output gradient to one
gradient per parent. :func:`backward` replays the recorded graph in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_CHECKED = False
_GRAD_ENABLED = True


class TensorError(Exception):
    """Base class for tensor-level failures."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(TensorError, FloatingPointError):
    pass


class GraphConsumedError(TensorError, RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch storage precision (float64 for verification, float32 for speed)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


def set_checked(flag: bool) -> None:
    """Enable non-finite input detection on every op."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


class checked_mode:
    """Context manager turning on checked mode for a block."""

    def __init__(self, flag: bool = True):
        self.flag = flag

    def __enter__(self):
        self._prev = _CHECKED
        set_checked(self.flag)
        return self

    def __exit__(self, *exc):
        set_checked(self._prev)
        return False


class no_grad:
    """Disable graph recording inside the block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


_CONSUMED = object()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "const"
        t.name = None
        return t

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- operators
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

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
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

    def backward(self, retain_graph: bool = False):
        return backward(self, retain_graph=retain_graph)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=_DTYPE))


def _check_finite(op: str, *ts: Tensor) -> None:
    for t in ts:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _make(op: str, arr: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    if _CHECKED:
        _check_finite("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    if _CHECKED:
        _check_finite("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    if _CHECKED:
        _check_finite("mul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make("mul", ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if _CHECKED:
        _check_finite("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make("div", out, (a, b), rule)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def _unary(op: str, a, fwd, dfn) -> Tensor:
    a = as_tensor(a)
    if _CHECKED:
        _check_finite(op, a)
    x = a.data
    y = fwd(x)
    return _make(op, y, (a,), lambda g: (g * dfn(x, y),))


def relu(a) -> Tensor:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a, _sigmoid, lambda x, y: y * (1.0 - y))


def silu(a) -> Tensor:
    a = as_tensor(a)
    if _CHECKED:
        _check_finite("silu", a)
    x = a.data
    s = _sigmoid(x)
    return _make("silu", x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _unary("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


# ---------------------------------------------------------------------- linalg
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None
    if _CHECKED:
        _check_finite("matmul", a, b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if ad.ndim == 2 and g.ndim == 2:
                gb = ad.T @ g
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make("matmul", np.matmul(ad, bd), (a, b), rule)


def grouped_matmul(x, weights: Sequence, bounds: Sequence[int]) -> Tensor:
    """Row-segment matmul: rows ``bounds[j]:bounds[j+1]`` of ``x`` times ``weights[j]``."""
    x = as_tensor(x)
    ws = [as_tensor(w) for w in weights]
    if len(bounds) != len(ws) + 1 or bounds[0] != 0 or bounds[-1] != x.shape[0]:
        raise ShapeError("grouped_matmul", x.shape, detail=f"bounds {list(bounds)} for {len(ws)} weights")
    for w in ws:
        if w.ndim != 2 or w.shape[0] != x.shape[-1] or w.shape[1] != ws[0].shape[1]:
            raise ShapeError("grouped_matmul", x.shape, w.shape)
    if _CHECKED:
        _check_finite("grouped_matmul", x, *ws)
    xd = x.data
    out = np.empty((xd.shape[0], ws[0].shape[1]), dtype=xd.dtype)
    for j, w in enumerate(ws):
        a, b = bounds[j], bounds[j + 1]
        out[a:b] = xd[a:b] @ w.data

    def rule(g):
        gx = None
        if x.requires_grad:
            gx = np.empty_like(xd)
            for j, w in enumerate(ws):
                a, b = bounds[j], bounds[j + 1]
                gx[a:b] = g[a:b] @ w.data.T
        gws = []
        for j, w in enumerate(ws):
            a, b = bounds[j], bounds[j + 1]
            gws.append(xd[a:b].T @ g[a:b] if w.requires_grad else None)
        return (gx, *gws)

    return _make("grouped_matmul", out, (x, *ws), rule)


# ------------------------------------------------------------------ reductions
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if _CHECKED:
        _check_finite("softmax", a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def l2norm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    a = as_tensor(a)
    if _CHECKED:
        _check_finite("l2norm", a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x / safe, 0.0),)

    return _make("l2norm", n if keepdims else np.squeeze(n, axis), (a,), rule)


def rms_norm(x, weight, eps: float = 1e-5) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1:] != weight.shape:
        raise ShapeError("rms_norm", x.shape, weight.shape)
    if _CHECKED:
        _check_finite("rms_norm", x, weight)
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def rule(g):
        gw = (g * xhat).reshape(-1, wd.shape[0]).sum(axis=0) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * wd
            gx = r * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make("rms_norm", xhat * wd, (x, weight), rule)


def cross_entropy(logits, targets) -> Tensor:
    """Mean token cross-entropy of ``logits`` (..., V) against integer ``targets`` (...)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    if z.shape[0] != t.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, np.shape(targets))
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ValueError(f"cross_entropy: target ids must lie in [0, {V})")
    if _CHECKED:
        _check_finite("cross_entropy", logits)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    rows = np.arange(t.size)
    loss = (lse[:, 0] - z[rows, t]).mean()
    shape = logits.shape

    def rule(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1.0
        return ((g / t.size) * p.reshape(shape),)

    return _make("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), rule)


# -------------------------------------------------------------------- indexing
def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]``; also used to gather token rows by index."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids must lie in [0, {weight.shape[0]})")
    wshape = weight.shape

    def rule(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape((-1,) + wshape[1:]))
        return (gw,)

    return _make("embedding", weight.data[ids], (weight,), rule)


gather_rows = embedding


def scatter_add(n_rows: int, index, src) -> Tensor:
    """``out[index[j]] += src[j]`` into a zero tensor with ``n_rows`` rows."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != src.shape[:1]:
        raise ShapeError("scatter_add", index.shape, src.shape)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    np.add.at(out, index, src.data)
    return _make("scatter_add", out, (src,), lambda g: (g[index],))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)

    def rule(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make("getitem", a.data[key], (a,), rule)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make("reshape", y, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", y, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ------------------------------------------------------------------------ rope
def rope_tables(seq_len: int, head_dim: int, base: float = 1_000_000.0):
    """cos/sin tables of shape (seq_len, head_dim) for rotate-half RoPE."""
    if head_dim % 2:
        raise ValueError("rotary embedding needs an even head dimension")
    inv = 1.0 / (base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    ang = np.outer(np.arange(seq_len, dtype=np.float64), inv)
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(_DTYPE), np.sin(ang).astype(_DTYPE)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def apply_rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate ``x`` (..., T, D) by position; ``cos``/``sin`` are (T, D) tables."""
    x = as_tensor(x)
    T, D = x.shape[-2:]
    if cos.shape[0] < T or cos.shape[1] != D:
        raise ShapeError("apply_rope", x.shape, cos.shape)
    c, s = cos[:T], sin[:T]
    xd = x.data
    h = D // 2

    def rule(g):
        u = g * s
        return (g * c + np.concatenate([u[..., h:], -u[..., :h]], axis=-1),)

    return _make("rope", xd * c + _rotate_half(xd) * s, (x,), rule)


# -------------------------------------------------------------------- backward
def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is _CONSUMED:
            raise GraphConsumedError("backward through a graph that was already consumed; run a new forward")
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, retain_graph: bool = False):
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``. Returns a map
    from tensor to gradient for ``params`` (every reached leaf when omitted);
    requested tensors the loss does not reach map to exact zeros. Unless
    ``retain_graph`` is set, the graph is freed and cannot be replayed.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if loss._backward is _CONSUMED:
        raise GraphConsumedError("backward called twice on the same graph")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        order = _toposort(loss)
        grads[id(loss)] = np.ones(loss.shape, dtype=loss.data.dtype)
        for node in reversed(order):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if node._backward is None or not node._parents:
                if node.requires_grad and g is not None:
                    leaves[id(node)] = node
                continue
            if g is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        if not retain_graph:
            for node in order:
                if node._parents:
                    node._backward = _CONSUMED
                    node._parents = ()
    for k, leaf in leaves.items():
        g = grads[k]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if params is None:
        return {leaf: grads[k] for k, leaf in leaves.items()}
    out = {}
    for p in params:
        g = grads.get(id(p)) if id(p) in leaves else None
        out[p] = g if g is not None else np.zeros(p.shape, dtype=p.data.dtype)
    return out
