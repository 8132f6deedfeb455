"""Minimal reverse-mode autodiff engine over dense numpy arrays.

Every differentiable operation records a backward closure on its output;
``backward`` on a scalar loss walks the graph once in reverse topological
order and accumulates gradients into the leaves. Calling ``backward`` twice
without zeroing accumulates (documented contract; the optimizer zeroes
between steps).

Training runs in float32; gradient-check suites build float64 tensors and
every op preserves the dtype of its inputs.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NumericError(RuntimeError):
    """Raised when a non-finite value is detected where finiteness is required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

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

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    # operator sugar -------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def backward(self):
        backward(self)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(_as_array(x, dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Populate ``grad`` on every reachable leaf with requires_grad.

    The loss must be a scalar (size-1) tensor. Repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise ValueError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    # iterative topological order (graphs can be thousands of nodes deep)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    # interior grads are per-pass scratch; leaf grads accumulate across passes
    for node in topo:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, like=a)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, like=a)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, like=a)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, like=a)
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def exp(x: Tensor) -> Tensor:
    x = _lift(x)
    out_data = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out_data)

    return _make(out_data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    x = _lift(x)
    out_data = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return _make(out_data, (x,), bwd)


def clamp_max(x: Tensor, limit: float) -> Tensor:
    """Elementwise min(x, limit); gradient is blocked where the clamp binds."""
    x = _lift(x)
    out_data = np.minimum(x.data, limit)

    def bwd(g):
        _accum(x, g * (x.data <= limit).astype(x.data.dtype))

    return _make(out_data, (x,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu."""
    x = _lift(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        grad = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        _accum(x, g * grad)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    in_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(in_shape))

    return _make(out_data, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _make(out_data, (x,), bwd)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(_lift(x).data.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def narrow(x: Tensor, idx) -> Tensor:
    """Differentiable basic slicing (contiguous views on the forward pass)."""
    x = _lift(x)
    out_data = x.data[idx]

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[idx] += g

    return _make(out_data, (x,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, ts, bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    in_shape = x.data.shape
    out_data = np.broadcast_to(x.data, shape).copy()

    def bwd(g):
        _accum(x, _unbroadcast(g, in_shape))

    return _make(out_data, (x,), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(out_data, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when either operand has >2 dims."""
    a = _lift(a)
    b = _lift(b, like=a)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError(f"matmul requires >=1-dim operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.data.shape} and {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization / activation blocks
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax (max subtraction along ``axis``)."""
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-d tensor, got shape {x.data.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def bwd(g):
        _accum(x, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _lift(x)
    gain = _lift(gain, like=x)
    bias = _lift(bias, like=x)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layernorm: gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            term1 = gx
            term2 = gx.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (term1 - term2 - term3))

    return _make(out_data, (x, gain, bias), bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit L2 norm."""
    x = _lift(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out_data = x.data / norm

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(x, (g - out_data * dot) / norm)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# gather-style ops
# ---------------------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward into the table."""
    weight = _lift(weight)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.data.shape[0]):
        raise ValueError(
            f"embedding id out of range [0, {weight.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out_data = weight.data[ids]

    def bwd(g):
        if not weight.requires_grad:
            return
        if weight.grad is None:
            weight.grad = np.zeros_like(weight.data)
        np.add.at(weight.grad, ids.reshape(-1), g.reshape(-1, weight.data.shape[1]))

    return _make(out_data, (weight,), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = x[i, idx[i], :] for a (N, L, D) tensor."""
    x = _lift(x)
    idx = np.asarray(idx)
    n = x.data.shape[0]
    if idx.shape != (n,):
        raise ShapeError(f"gather_rows: idx must have shape ({n},), got {idx.shape}")
    rows = np.arange(n)
    out_data = x.data[rows, idx]

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (rows, idx), g)

    return _make(out_data, (x,), bwd)


def diag(x: Tensor) -> Tensor:
    """Main diagonal of a square matrix, differentiable."""
    x = _lift(x)
    n, m = x.data.shape
    if n != m:
        raise ShapeError(f"diag expects a square matrix, got shape {x.data.shape}")
    rows = np.arange(n)
    out_data = x.data[rows, rows]

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[rows, rows] += g

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

_conv_index_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _conv_indices(c: int, h: int, w: int, kh: int, kw: int, stride: int, ho: int, wo: int):
    key = (c, h, w, kh, kw, stride, ho, wo)
    hit = _conv_index_cache.get(key)
    if hit is not None:
        return hit
    i0 = np.repeat(np.arange(kh), kw)
    i0 = np.tile(i0, c)
    i1 = stride * np.repeat(np.arange(ho), wo)
    j0 = np.tile(np.arange(kw), kh * c)
    j1 = stride * np.tile(np.arange(wo), ho)
    rows = i0.reshape(-1, 1) + i1.reshape(1, -1)
    cols = j0.reshape(-1, 1) + j1.reshape(1, -1)
    _conv_index_cache[key] = (rows, cols)
    return rows, cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OCKK kernel (im2col + matmul)."""
    x = _lift(x)
    kernel = _lift(kernel, like=x)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d: non-integral output size for input {x.data.shape}, "
            f"kernel {kernel.data.shape}, stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    rows, cols = _conv_indices(c, h + 2 * padding, w + 2 * padding, kh, kw, stride, ho, wo)
    chans = np.repeat(np.arange(c), kh * kw).reshape(-1, 1)
    cols_mat = xp[:, chans, rows, cols]  # (n, c*kh*kw, ho*wo)
    kmat = kernel.data.reshape(o, -1)
    out_data = (kmat @ cols_mat).reshape(n, o, ho, wo)

    def bwd(g):
        gmat = g.reshape(n, o, -1)
        if kernel.requires_grad:
            gk = np.einsum("nol,ncl->oc", gmat, cols_mat, optimize=True)
            _accum(kernel, gk.reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = np.swapaxes(kmat, 0, 1) @ gmat  # (n, c*kh*kw, ho*wo)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, (slice(None), chans, rows, cols), gcols)
            if padding:
                gx = gxp[:, :, padding:-padding, padding:-padding]
            else:
                gx = gxp
            _accum(x, gx)

    return _make(out_data, (x, kernel), bwd)


def check_finite(x: Tensor, what: str = "tensor"):
    """NaN/Inf is an error state, never a value."""
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite values in {what}")
    return x
