"""Dense float tensors with reverse-mode differentiation.

Values are float32 by default; float64 is allowed so gradient audits get
extra headroom.  Ops build a closure graph; ``Tensor.backward`` walks it in
reverse topological order.  Everything is deterministic and single-threaded.
"""
from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import _kernels


class ShapeMismatch(ValueError):
    pass


class NonFiniteValues(ValueError):
    pass


_DEBUG_FINITE = os.environ.get("DIVGATE_DEBUG_FINITE", "") not in ("", "0")
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph building (sampling / evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValues(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, check=True):
        if dtype is None:
            # float64 ndarrays keep their precision (the audit path);
            # everything else lands on the float32 default
            if isinstance(data, np.ndarray) and data.dtype == np.float64:
                dtype = np.float64
            else:
                dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if check:
            _check_finite(arr, "tensor data")
        self.data = arr
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False, dtype=self.data.dtype)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeMismatch(f"backward() needs a scalar output, got shape {self.shape}")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar; scalars are promoted to constants of matching dtype
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0, self.dtype))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _coerce(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), check=False, dtype=dtype)


def _make(data, parents, backward) -> Tensor:
    if _DEBUG_FINITE:
        _check_finite(data, "op result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_check(a: Tensor, b: Tensor, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "add")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "sub")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "mul")

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_check(a, b, "div")
    inv = 1.0 / b.data

    def back(g):
        _accum(a, _unbroadcast(g * inv, a.shape))
        _accum(b, _unbroadcast(-g * a.data * inv * inv, b.shape))

    return _make(a.data * inv, (a, b), back)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def back(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(a.data**p, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / y)

    return _make(y, (a,), back)


def log(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def back(g):
        _accum(a, g * y)

    return _make(y, (a,), back)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through the interior, zero outside."""
    mask = (a.data >= lo) & (a.data <= hi)

    def back(g):
        _accum(a, g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), back)


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)

    def back(g):
        _accum(a, g * sgn)

    return _make(np.abs(a.data), (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: inner dims of {tuple(a.shape)} and {tuple(b.shape)} differ")

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), back)


# -------------------------------------------------------------- activations

def sigmoid(a: Tensor) -> Tensor:
    # split by sign for overflow-free exp
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype)

    def back(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _make(np.maximum(a.data, 0), (a,), back)


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    y = (x * s).astype(x.dtype)

    def back(g):
        _accum(a, g * (s * (1.0 + x * (1.0 - s))).astype(x.dtype))

    return _make(y, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), back)


# ------------------------------------------------------------------ movement

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), back)


def concat(tensors, axis: int = 1) -> Tensor:
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(b != o for i, (b, o) in enumerate(zip(base, other)) if i != axis):
            raise ShapeMismatch(f"concat: shape {tuple(t.shape)} incompatible with {tuple(tensors[0].shape)} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), back)


def split(a: Tensor, sizes, axis: int = 1) -> list:
    """Inverse of concat: chunks of the given sizes along ``axis``."""
    if sum(sizes) != a.shape[axis]:
        raise ShapeMismatch(f"split: sizes {sizes} do not cover axis {axis} of {tuple(a.shape)}")
    out, start = [], 0
    for s in sizes:
        out.append(narrow(a, axis, start, s))
        start += s
    return out


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.shape) / np.asarray(count, dtype=a.dtype))

    return _make(a.data.mean(axis=axes, keepdims=keepdims, dtype=a.dtype), (a,), back)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences."""
    _binary_check(a, b, "l1_distance")
    return sum_(absolute(sub(a, b)))


def l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance."""
    _binary_check(a, b, "l2_distance")
    d = sub(a, b)
    return sqrt(sum_(mul(d, d)))


# -------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, square stride/padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: need 4-D input/kernel, got {tuple(x.shape)} and {tuple(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input channels {tuple(x.shape)} do not match kernel {tuple(w.shape)}")
    n, c, h, iw = x.shape
    oc, _, kh, kw = w.shape
    if h + 2 * pad < kh or iw + 2 * pad < kw:
        raise ShapeMismatch(f"conv2d: kernel {tuple(w.shape)} larger than padded input {tuple(x.shape)}")
    cols = None
    if _grad_enabled and w.requires_grad and _kernels.conv2d_forward_cols is not None:
        y, cols = _kernels.conv2d_forward_cols(x.data, w.data, stride, pad)
    else:
        y = _kernels.conv2d_forward(x.data, w.data, stride, pad)
    if b is not None:
        y = y + b.data.reshape(1, oc, 1, 1)

    def back(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accum(x, _kernels.conv2d_grad_input(g, w.data, stride, pad, h, iw))
        if w.requires_grad:
            if cols is not None:
                _accum(w, _kernels.conv2d_grad_weight_cols(g, cols, c, kh, kw))
            else:
                _accum(w, _kernels.conv2d_grad_weight(g, x.data, stride, pad, kh, kw))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, back)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"upsample_nearest: need 4-D input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    y = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def back(g):
        _accum(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(y, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool: need 4-D input, got {tuple(x.shape)}")
    return mean(x, axis=(2, 3))


def avg_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping window average pooling (stride = window)."""
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeMismatch(f"avg_pool: window {window} does not divide {tuple(x.shape)}")
    r = reshape(x, (n, c, h // window, window, w // window, window))
    return mean(r, axis=(3, 5))


# ------------------------------------------------------------- normalization

def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Fused groupwise normalization (hot path, hand-derived backward)."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeMismatch(f"group_norm: {groups} groups do not divide {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True, dtype=x.dtype)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=2, keepdims=True, dtype=x.dtype) + np.asarray(eps, x.dtype))
    xn = (xc * inv).reshape(n, c, h, w)
    y = xn * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def back(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xn).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxn = (g * gamma.data.reshape(1, c, 1, 1)).reshape(n, groups, -1)
            xng = xn.reshape(n, groups, -1)
            m1 = gxn.mean(axis=2, keepdims=True, dtype=x.dtype)
            m2 = (gxn * xng).mean(axis=2, keepdims=True, dtype=x.dtype)
            _accum(x, ((gxn - m1 - xng * m2) * inv).reshape(n, c, h, w))

    return _make(y, (x, gamma, beta), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, train: bool, update: bool | None = None,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over (N,H,W) for 4-D input or N for 2-D input.

    Training mode normalizes with batch statistics; inference uses the
    running averages.  ``update`` (defaults to ``train``) controls the
    running-average side effect so audits can re-evaluate without drift.
    """
    nd = x.data.ndim
    if nd == 4:
        axes, c = (0, 2, 3), x.shape[1]
        bshape = (1, c, 1, 1)
    elif nd == 2:
        axes, c = (0,), x.shape[1]
        bshape = (1, c)
    else:
        raise ShapeMismatch(f"batch_norm: need 2-D or 4-D input, got {tuple(x.shape)}")
    if update is None:
        update = train
    if train:
        mu = mean(x, axis=axes, keepdims=True)
        xc = sub(x, mu)
        var = mean(mul(xc, xc), axis=axes, keepdims=True)
        if update:
            cnt = x.data.size // c
            corr = cnt / (cnt - 1) if cnt > 1 else 1.0
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu.data.reshape(c)
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * corr * var.data.reshape(c)
        xn = div(xc, sqrt(var + eps))
    else:
        mu = Tensor(running_mean.data.reshape(bshape), check=False, dtype=x.dtype)
        var = Tensor(running_var.data.reshape(bshape), check=False, dtype=x.dtype)
        xn = div(sub(x, mu), sqrt(var + eps))
    return add(mul(xn, reshape(gamma, bshape)), reshape(beta, bshape))


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named parameters, each value paired with a same-shape gradient."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._entries[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if self._trainable[n]]

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self._entries) - set(arrays)
        extra = set(arrays) - set(self._entries)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, t in self._entries.items():
            arr = np.asarray(arrays[n], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"parameter {n!r}: stored shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()
            t.grad = np.zeros_like(t.data)
