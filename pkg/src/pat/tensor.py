"""Dense tensors with reverse-mode differentiation.

Every primitive validates its input shapes, computes the forward value with
numpy, and records a closure mapping the output gradient to one gradient per
parent. ``Tensor.backward`` walks the recorded graph in reverse topological
order and accumulates into leaf tensors that require gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3

_grad_enabled = True
_default_dtype = np.dtype(np.float32)


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shape."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Set the dtype used for freshly created tensors (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev, _default_dtype = _default_dtype, dtype
    try:
        yield
    finally:
        _default_dtype = prev


def default_dtype() -> np.dtype:
    return _default_dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "meta", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf", meta=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"{op}: rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op}: non-finite value produced (shape {arr.shape})")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.meta = meta
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def parents(self) -> tuple:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op} backward: gradient shape {pg.shape} != input shape {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not a supported primitive")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=requires_grad)


def _result(data, parents: Sequence[Tensor], op: str, backward: Callable, meta=None) -> Tensor:
    out = Tensor(data, op=op, meta=meta)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    elif meta is not None:
        # keep lineage for graph audits even when nothing needs gradients
        out._parents = tuple(parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


def _pair(op, a, b):
    a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, a.dtype)
    _check_broadcast(op, a, b)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 0.0:
        return Tensor(np.ones_like(a.data), op="pow")
    x = a.data
    if p != 1.0 and (x < 0).any():
        raise ValueError("pow: negative base with non-integer exponent is unsupported")

    def backward(g):
        if p == 1.0:
            return (g,)
        with np.errstate(divide="ignore"):
            d = p * np.power(x, p - 1.0)
        # subgradient 0 at the origin when 0 < p < 1
        d = np.where(x == 0, 0.0, d).astype(x.dtype)
        return (g * d,)

    return _result(np.power(x, p), (a,), "pow", backward)


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)

    def backward(g):
        return (g / x,)

    return _result(out, (a,), "log", backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), "exp", backward)


def sigmoid(a: Tensor) -> Tensor:
    out = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), "sigmoid", backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _result(out, (a,), "gelu", backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu", backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x > lo) & (x < hi)

    def backward(g):
        return (g * inside,)

    return _result(np.clip(x, lo, hi), (a,), "clip", backward)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), "sum", backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- structure

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), "reshape", backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose", backward)


def concat(tensors: Iterable[Tensor], axis=-1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; ``idx`` may have any integer shape."""
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: index out of range for table {table.shape}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[idx], (table,), "take_rows", backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, batched 3-D @ 3-D, or 3-D @ 2-D (shared right operand)."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        (a.ndim == 2 and b.ndim == 2)
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 2)
    )
    if not ok or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        ga = g @ bt
        if a.ndim == 3 and b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data  # overflow is reported by the finite check
    return _result(out, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), "softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), "layer_norm", backward)


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution of ``x`` (T, C_in) with ``w`` (k, C_in, C_out), zero padding."""
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and weight {w.shape} do not conform")
    if b is not None and b.shape != (w.shape[2],):
        raise ShapeError(f"conv1d: bias {b.shape} does not match weight {w.shape}")
    T, cin = x.shape
    k, _, cout = w.shape
    t_out = conv_out_len(T, k, stride, padding)
    if t_out < 1:
        raise ShapeError(f"conv1d: input {x.shape} too short for kernel {k}, padding {padding}")
    xp = np.zeros((T + 2 * padding, cin), dtype=x.dtype)
    xp[padding:padding + T] = x.data
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]
    cols = xp[idx].reshape(t_out, k * cin)
    wr = w.data.reshape(k * cin, cout)
    out = cols @ wr
    if b is not None:
        out = out + b.data

    def backward(g):
        gw = (cols.T @ g).reshape(w.shape)
        gcols = (g @ wr.T).reshape(t_out, k, cin)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, idx, gcols)
        grads = [gxp[padding:padding + T], gw]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    meta = {"stride": stride, "kernel": k, "padding": padding}
    return _result(out, parents, "conv1d", backward, meta=meta)


def resample_linear(x: Tensor, length: int) -> Tensor:
    """Linear interpolation along the time axis with aligned endpoints."""
    if x.ndim != 2 or length < 1:
        raise ShapeError(f"resample_linear: input {x.shape} to length {length}")
    t_in = x.shape[0]
    if length == 1 or t_in == 1:
        src = np.zeros(length)
    else:
        src = np.arange(length) * ((t_in - 1) / (length - 1))
    lo = np.minimum(np.floor(src).astype(np.int64), t_in - 1)
    hi = np.minimum(lo + 1, t_in - 1)
    frac = (src - lo).astype(x.dtype)[:, None]
    xl, xh = x.data[lo], x.data[hi]
    # lo + frac * (hi - lo) returns constants exactly
    out = xl + frac * (xh - xl)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, lo, g * (1 - frac))
        np.add.at(gx, hi, g * frac)
        return (gx,)

    return _result(out, (x,), "resample_linear", backward)


def rel_skew(s: Tensor) -> Tensor:
    """Map relative logits (..., N, 2N-1) to absolute (..., N, N) by pad-and-reshape.

    Column k of the input holds the score for key offset m - n = k - (N - 1);
    output entry (n, m) is input entry (n, m - n + N - 1). No gather index or
    N x N x D intermediate is formed.
    """
    n = s.shape[-2]
    if s.shape[-1] != 2 * n - 1:
        raise ShapeError(f"rel_skew: expected trailing shape (N, 2N-1), got {s.shape}")
    lead = s.shape[:-2]
    padded = np.concatenate([s.data, np.zeros(lead + (n, 1), dtype=s.dtype)], axis=-1)
    flat = padded.reshape(lead + (2 * n * n,))
    out = flat[..., n - 1:n - 1 + n * (2 * n - 1)].reshape(lead + (n, 2 * n - 1))[..., :n]

    def backward(g):
        gflat = np.zeros(lead + (2 * n * n,), dtype=g.dtype)
        window = gflat[..., n - 1:n - 1 + n * (2 * n - 1)].reshape(lead + (n, 2 * n - 1))
        window[..., :n] = g
        gflat[..., n - 1:n - 1 + n * (2 * n - 1)] = window.reshape(lead + (n * (2 * n - 1),))
        return (gflat.reshape(lead + (n, 2 * n))[..., :2 * n - 1],)

    return _result(np.ascontiguousarray(out), (s,), "rel_skew", backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _result(a.data * keep, (a,), "dropout", backward)
