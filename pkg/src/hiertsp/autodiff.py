"""Minimal tape-based reverse-mode automatic differentiation over numpy arrays.

Every primitive records itself on the active :class:`Graph` when one of its
inputs requires a gradient. ``backward`` walks the tape in reverse recording
order, which is a valid reverse topological order, so gradient accumulation
is deterministic for a fixed construction order.

Broadcasting rules:

* ``add``, ``sub``, ``mul``, ``masked_fill``: numpy broadcasting; the gradient
  is summed back over broadcast axes.
* ``matmul``: ``[..., m, k] @ [..., k, n] -> [..., m, n]`` with numpy batch
  broadcasting on the leading axes.
* ``concat_lastdim``: all inputs share every axis but the last.
* ``gather_rows``: ``x[..., n, d]`` indexed by integer ``idx[..., k]`` with the
  same leading axes, giving ``[..., k, d]``.
* ``softmax_lastdim``, ``layer_norm``: normalise over the last axis.
* ``reduce_sum`` / ``reduce_mean``: over one axis or all axes.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

NEG_SENTINEL = -1e9

_ids = itertools.count()
_active: list["Graph"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Op:
    __slots__ = ("kind", "inputs", "out_id", "backward_fn")

    def __init__(self, kind, inputs, out_id, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.out_id = out_id
        self.backward_fn = backward_fn


class Graph:
    """Ordered record of primitive operations.

    Use as a context manager; primitives executed inside the block are
    recorded here.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def __len__(self):
        return len(self.ops)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    # outside a Graph nothing is recorded, which doubles as inference mode
    need = bool(_active) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=need)
    if need:
        _active[-1].ops.append(_Op(kind, tuple(inputs), out.node_id, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(g, sb) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              -_unbroadcast(g, sb) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return _record("elementwise_mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scalar_mul", (a,), a.data * a.data.dtype.type(s),
                   lambda g: (g * g.dtype.type(s),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # shared weight matrix: fold batch axes into rows for a single BLAS call
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(*ad.shape[:-1], n)

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _record("matmul", (a, b), out, bw)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record("relu", (a,), np.where(pos, a.data, 0).astype(a.dtype), lambda g: (g * pos,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_lastdim", (a,), y, bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record("layer_norm", (a,), y.astype(x.dtype, copy=False), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = NEG_SENTINEL) -> Tensor:
    # copied: callers often mutate their mask (e.g. a visited set) after the call
    mask = np.array(mask, dtype=bool, copy=True)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} vs input {a.shape}") from None
    out = np.where(mask, a.data.dtype.type(value), a.data)
    sa = a.shape
    return _record("masked_fill", (a,), out, lambda g: (_unbroadcast(np.where(mask, 0, g), sa),))


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_lastdim: shapes {parts[0].shape} and {p.shape} differ before last axis")
    sizes = [p.shape[-1] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat_lastdim", parts, np.concatenate([p.data for p in parts], axis=-1),
                   lambda g: tuple(np.split(g, cuts, axis=-1)))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    x = a.data
    idx = np.array(idx, dtype=np.int64, copy=True)
    if x.ndim < 2 or idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not match input {x.shape}")
    lead = x.shape[:-2]
    n, d = x.shape[-2:]
    m = int(np.prod(lead, dtype=np.int64))
    xf = x.reshape(m, n, d)
    idf = idx.reshape(m, -1)
    rows = np.arange(m)[:, None]
    out = xf[rows, idf].reshape(*idx.shape, d)

    def bw(g):
        # scatter-add as a one-hot batched matmul: [m, n, k] @ [m, k, d]
        onehot = (idf[:, None, :] == np.arange(n)[None, :, None]).astype(g.dtype)
        return ((onehot @ g.reshape(m, -1, d)).reshape(x.shape),)

    return _record("gather_rows", (a,), out, bw)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    sa = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, sa),)

    return _record("reduce_sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), bw)


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    sa = a.shape
    count = a.data.size if axis is None else sa[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, sa),)

    return _record("reduce_mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), bw)


def transpose_last_two(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last_two: need rank >= 2, got {a.shape}")
    return _record("transpose_last_two", (a,), np.swapaxes(a.data, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    sa = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {sa} as {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(sa),))


PRIMITIVES = {
    "matmul": matmul, "add": add, "sub": sub, "elementwise_mul": mul,
    "scalar_mul": scalar_mul, "tanh": tanh, "relu": relu, "log": log,
    "softmax_lastdim": softmax_lastdim, "layer_norm": layer_norm,
    "masked_fill": masked_fill, "concat_lastdim": concat_lastdim,
    "gather_rows": gather_rows, "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum, "transpose_last_two": transpose_last_two,
    "reshape": reshape,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward

def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``graph``; returns node_id -> gradient.

    Leaves that require a gradient also get ``.grad`` set (accumulated into
    any existing value). Leaves disconnected from ``loss`` are simply absent.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for op in reversed(graph.ops):
        g = grads.pop(op.out_id, None)
        if g is None:
            continue
        in_grads = op.backward_fn(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
            leaves.setdefault(t.node_id, t)
    for nid, t in leaves.items():
        if nid in grads:
            g = np.ascontiguousarray(grads[nid]).reshape(t.shape)
            grads[nid] = g
            t.grad = g if t.grad is None else t.grad + g
    return grads


# ------------------------------------------------------------ finite diffs

def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                 skip: np.ndarray | None = None) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``x.data``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    skip_flat = None if skip is None else np.asarray(skip, bool).reshape(-1)
    for i in range(flat.size):
        if skip_flat is not None and skip_flat[i]:
            continue
        old = flat[i]
        flat[i] = old + eps
        fp = float(fn().data)
        flat[i] = old - eps
        fm = float(fn().data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and numeric gradients over ``inputs``."""
    for t in inputs:
        t.grad = None
    with Graph() as g:
        loss = fn()
    backward(g, loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numeric_grad(fn, t, eps)))
    return worst
