"""Dense float tensors (rank <= 4, NCHW image layout) with reverse-mode autodiff.

Everything is backed by contiguous numpy arrays in float32 (float64 available
for verification). Operations record a graph when any input requires grad;
``backward()`` on a scalar loss fills ``.grad`` on every reachable leaf.

Broadcasting is deliberately restricted to scalar-vs-tensor and equal shapes.
Structured mismatches (per-channel bias, per-sample embeddings) go through
dedicated ops instead, so shape bugs fail loudly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_finite_checks = False


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, EMA, eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Verify every op output is finite inside the block. Slow; used in tests."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A numpy-backed array node in an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} > 4 unsupported")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- graph plumbing ------------------------------------------------------

    def detach(self) -> "Tensor":
        """Constant view of the same values; gradients stop here."""
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        if self.requires_grad and _grad_enabled:
            raise ValueError("astype on a graph tensor is not differentiable")
        return Tensor(self.data.astype(dtype))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; each node visited exactly once.

        The recorded graph is consumed: a second call on the same loss raises.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar (single-element) loss")
        if self._consumed:
            raise RuntimeError("backward() called twice on the same graph")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward
            if fn is not None and node.grad is not None:
                fn(node.grad)
            node._consumed = True
        for node in order:
            node._backward = None
            node._parents = ()

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _wrap_like(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    track = _grad_enabled and backward is not None and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    _check_finite(data, op)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # Rebinds instead of += so a grad array may alias an upstream buffer safely.
    if t.requires_grad or t._parents:
        t.grad = g if t.grad is None else t.grad + g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _wrap_like(a, b)
    if not isinstance(b, Tensor):
        b = _wrap_like(b, a)
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape} "
                         "(only scalar and equal-shape broadcasting supported)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(dtype=g.dtype).reshape(shape)


# -- elementwise ops ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, "div", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, "neg", (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accum(a, g * y)

    return _make(y, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.min(a.data) <= 0.0:
        raise ValueError("log of non-positive input")

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), "log", (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.min(a.data) < 0.0:
        raise ValueError("sqrt of negative input")
    y = np.sqrt(a.data)

    def backward(g):
        _accum(a, g / (2.0 * y))

    return _make(y, "sqrt", (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # stable in both tails: exp argument is always <= 0
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)

    def backward(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, "sigmoid", (a,), backward)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    y = a.data * s

    def backward(g):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(y, "silu", (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return _make(a.data * a.data, "square", (a,), backward)


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _make(a.data.sum(dtype=a.data.dtype).reshape(()), "sum", (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype))

    return _make((a.data.sum(dtype=a.data.dtype) / n).reshape(()), "mean", (a,), backward)


def sum_per_sample(a: Tensor) -> Tensor:
    """Sum over all non-batch axes: (N, ...) -> (N,)."""
    n = a.shape[0]
    y = a.data.reshape(n, -1).sum(axis=1, dtype=a.data.dtype)

    def backward(g):
        _accum(a, np.broadcast_to(g.reshape((n,) + (1,) * (a.ndim - 1)), a.shape).astype(a.data.dtype))

    return _make(y, "sum_per_sample", (a,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over batch and elements."""
    return tmean(square(sub(a, b)))


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(np.ascontiguousarray(a.data.reshape(shape)), "reshape", (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[idx] = g
        _accum(a, full)

    return _make(np.ascontiguousarray(a.data[idx]), "slice_axis", (a,), backward)


# -- neural-net ops ----------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """(N, D) @ (D, O) + (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    return _make(y, "linear", parents, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (B, M, K) @ (B, K, N) -> (B, M, N)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def backward(g):
        _accum(a, np.matmul(g, b.data.transpose(0, 2, 1)))
        _accum(b, np.matmul(a.data.transpose(0, 2, 1), g))

    return _make(y, "bmm", (a, b), backward)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: table (K, D), idx (N,) ints -> (N, D)."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding indices must be a 1-d integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError("embedding index out of range")

    def backward(g):
        full = np.zeros(table.shape, dtype=table.data.dtype)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _make(np.ascontiguousarray(table.data[idx]), "embedding", (table,), backward)


def add_channel_vec(x: Tensor, v: Tensor) -> Tensor:
    """(N, C, H, W) + (N, C) broadcast over spatial axes."""
    if x.ndim != 4 or v.ndim != 2 or x.shape[:2] != v.shape:
        raise ValueError(f"add_channel_vec shape mismatch: {x.shape} + {v.shape}")

    def backward(g):
        _accum(x, g)
        _accum(v, g.sum(axis=(2, 3)))

    return _make(x.data + v.data[:, :, None, None], "add_channel_vec", (x, v), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)

    def backward(g):
        _accum(x, g * keep * scale)

    return _make(x.data * keep * scale, "dropout", (x,), backward)


def softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, (g - inner) * y)

    return _make(y, "softmax", (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy in nats; labels are class indices of shape (N,)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        _accum(logits, (g * p / n).astype(logits.data.dtype))

    return _make(np.asarray(loss, dtype=logits.data.dtype).reshape(()), "softmax_ce",
                 (logits,), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) normalization over (C/groups, H, W)."""
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("gamma/beta must have shape (C,)")
    dt = x.data.dtype
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    m = xg.shape[2]

    def backward(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xh).sum(axis=2, keepdims=True)
        dx = inv / m * (m * dxhat - s1 - xh * s2)
        _accum(x, dx.reshape(n, c, h, w).astype(dt))

    return _make(y.astype(dt), "group_norm", (x, gamma, beta), backward)


# -- convolution -------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Padded input (N, C, Hp, Wp) -> column matrix (C*kh*kw, N*oh*ow)."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input against OIHW kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects rank-4 input and kernel")
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    if c != i:
        raise ValueError(f"channel mismatch: input {c} vs kernel {i}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel spatial extents must be odd")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    y = (w.data.reshape(o, -1) @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    y = np.ascontiguousarray(y)
    if b is not None:
        if b.shape != (o,):
            raise ValueError("bias must have shape (out_channels,)")
        y += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        if w.requires_grad or w._parents:
            _accum(w, (g2 @ cols.T).reshape(w.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            dcols = w.data.reshape(o, -1).T @ g2
            dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.data.dtype)
            d6 = np.ascontiguousarray(
                dcols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5))
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * (oh - 1) + 1:stride,
                        kj:kj + stride * (ow - 1) + 1:stride] += d6[:, :, ki, kj]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _accum(x, np.ascontiguousarray(dxp))

    return _make(y, "conv2d", parents, backward)


# -- resize ------------------------------------------------------------------

_RESIZE_CACHE: dict[tuple, np.ndarray] = {}


def _resize_matrix(n_in: int, factor: int, mode: str, dtype) -> np.ndarray:
    """Interpolation matrix A (n_out, n_in) so that y = A @ x along one axis."""
    key = (n_in, factor, mode, np.dtype(dtype).str)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    if mode == "nearest":
        n_out = n_in * factor
        a = np.zeros((n_out, n_in), dtype=dtype)
        a[np.arange(n_out), np.arange(n_out) // factor] = 1.0
    elif mode == "bilinear":
        n_out = n_in * factor
        a = np.zeros((n_out, n_in), dtype=dtype)
        # half-pixel centers: output o samples input coordinate (o + 0.5)/f - 0.5
        pos = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.floor(pos).astype(int)
        frac = pos - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        np.add.at(a, (np.arange(n_out), lo), 1.0 - frac)
        np.add.at(a, (np.arange(n_out), hi), frac)
    elif mode == "area":
        if n_in % factor != 0:
            raise ValueError(f"extent {n_in} not divisible by area factor {factor}")
        n_out = n_in // factor
        a = np.zeros((n_out, n_in), dtype=dtype)
        for oi in range(n_out):
            a[oi, oi * factor:(oi + 1) * factor] = 1.0 / factor
    else:
        raise ValueError(f"unknown resize mode '{mode}'")
    _RESIZE_CACHE[key] = a
    return a


def resize(x: Tensor, factor: int, mode: str) -> Tensor:
    """Spatial resize of (N, C, H, W): nearest/bilinear upsample by ``factor``,
    or area downsample where ``factor`` divides both extents."""
    if x.ndim != 4:
        raise ValueError("resize expects a rank-4 NCHW tensor")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x
    h, w = x.shape[2], x.shape[3]
    dt = x.data.dtype
    ah = _resize_matrix(h, factor, mode, dt)
    aw = _resize_matrix(w, factor, mode, dt)
    y = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        _accum(x, np.ascontiguousarray(np.matmul(np.matmul(ah.T, g), aw)))

    return _make(np.ascontiguousarray(y), "resize", (x,), backward)
