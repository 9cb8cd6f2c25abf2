"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed. The canonical layout for all network operators is 4-D
(batch, channel, height, width), but the engine itself is rank-agnostic so
loss math on flat box/logit vectors runs through the same tape.

Conventions:
  * convolution is cross-correlation (no kernel flip),
  * float64 is the default dtype; float32 is opt-in for speed,
  * ops are pure: inputs are never mutated, outputs own their data,
  * gradients accumulate into ``Tensor.grad`` on ``backward()`` from a scalar.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


_grad_enabled = True
_check_finite = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval / finite-difference runs)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks():
    """Verify every op output is finite inside the block; raises naming the op."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    """A numpy array plus an optional spot on the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev: tuple = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff -------------------------------------------------------------

    def backward(self, free_graph: bool = True):
        """Reverse-mode sweep from this scalar; populates ``grad`` on the tape.

        Tensors that do not participate in the graph keep ``grad=None``,
        which readers must treat as zero.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in seen:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            if free_graph and node is not self:
                node._prev = ()
                node._backward = None
        if free_graph:
            self._prev = ()
            self._backward = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result; records on the tape only when grad mode is on."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(p for p in parents if p.requires_grad or p._prev)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._prev:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._prev:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad or b._prev:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(out_data, (a,), backward, "log")


def sqrt(a) -> Tensor:
    """Square root with a clamped sub-gradient: d/dx at x == 0 is taken as 0.

    The clamp matters for distance terms evaluated at exactly coincident
    boxes, where the true slope is unbounded.
    """
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(a.data > 0.0, 0.5 / out_data, 0.0)
        a._accumulate(g * d)

    return _make(out_data, (a,), backward, "sqrt")


def arctan(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.arctan(a.data)

    def backward(g):
        a._accumulate(g / (1.0 + a.data * a.data))

    return _make(out_data, (a,), backward, "arctan")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = expit(a.data)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def _silu_grad(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    # s = sigmoid(x); d/dx [x*s] = s * (1 + x*(1-s))
    return s * (1.0 + x * (1.0 - s))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    out_data = a.data * s

    def backward(g):
        a._accumulate(g * _silu_grad(a.data, s))

    return _make(out_data, (a,), backward, "silu")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(_unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        if b.requires_grad or b._prev:
            b._accumulate(_unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _make(out_data, (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def backward(g):
        if a.requires_grad or a._prev:
            a._accumulate(_unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        if b.requires_grad or b._prev:
            b._accumulate(_unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _make(out_data, (a, b), backward, "minimum")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > lo
    out_data = np.where(keep, a.data, lo)

    def backward(g):
        a._accumulate(np.where(keep, g, 0.0))

    return _make(out_data, (a,), backward, "clamp_min")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, log-sum-exp stable.

    bce(z, y) = max(z, 0) - z*y + log(1 + exp(-|z|));  d/dz = sigmoid(z) - y.
    ``targets`` is a constant array of the same shape.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    out_data = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        logits._accumulate(g * (expit(z) - y))

    return _make(out_data, (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# reductions / reshaping / indexing
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape) / count)

    return _make(out_data, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward, "reshape")


def slice_(a, key) -> Tensor:
    """Basic numpy slicing (ints, slices, tuples thereof) with scatter-add backward."""
    a = as_tensor(a)
    out_data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _make(np.ascontiguousarray(out_data), (a,), backward, "slice")


def take_flat(a, flat_indices: np.ndarray) -> Tensor:
    """Gather arbitrary elements by flat index; duplicates sum in backward."""
    a = as_tensor(a)
    idx = np.asarray(flat_indices, dtype=np.int64)
    out_data = a.data.reshape(-1)[idx]

    def backward(g):
        full = np.zeros(a.data.size, dtype=a.data.dtype)
        np.add.at(full, idx, g.reshape(-1))
        a._accumulate(full.reshape(a.data.shape))

    return _make(out_data, (a,), backward, "take_flat")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._prev:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return _make(out_data, tuple(parts), backward, "concat")


def stack_cols(tensors: Sequence) -> Tensor:
    """Stack same-length 1-D tensors into columns of an (n, k) tensor."""
    return concat([reshape(t, (-1, 1)) for t in tensors], axis=1)


# ---------------------------------------------------------------------------
# network operators (4-D only)
# ---------------------------------------------------------------------------


def _require_4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D (n, c, h, w) tensor, got shape {x.data.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """(n, c, hp, wp) -> (n, c, k*k, h_out*w_out) by k*k strided copies."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k * k, h_out, w_out), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki * k + kj] = xp[
                :, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride
            ]
    return cols.reshape(n, c, k * k, h_out * w_out)


def _col2im(dcols: np.ndarray, xp_shape, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add column gradients back onto the padded image."""
    n, c = xp_shape[:2]
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dc = dcols.reshape(n, c, k * k, h_out, w_out)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride] += dc[
                :, :, ki * k + kj
            ]
    return dxp


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation.

    weight is (c_out, c_in, k, k); output spatial size is
    floor((h + 2*padding - k) / stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _require_4d(x, "conv2d")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise ShapeError(f"conv2d weight must be (c_out, c_in, k, k), got {weight.data.shape}")
    n, c_in, h, w = x.data.shape
    c_out, c_in_w, k, _ = weight.data.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c_in} channels, weight expects {c_in_w}"
        )
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d kernel {k}x{k} does not fit input {h}x{w} with padding {padding}"
        )
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    cols = _im2col(xp, k, stride, h_out, w_out).reshape(n, c_in * k * k, h_out * w_out)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2[None], cols)
    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.data.shape != (c_out,):
            raise ShapeError(f"conv2d bias must have shape ({c_out},), got {b.data.shape}")
        out += b.data[None, :, None]
    out_data = out.reshape(n, c_out, h_out, w_out)

    def backward(g):
        g2 = g.reshape(n, c_out, h_out * w_out)
        if weight.requires_grad or weight._prev:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.data.shape))
        if b is not None and (b.requires_grad or b._prev):
            b._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad or x._prev:
            dcols = np.matmul(w2.T[None], g2)
            dxp = _col2im(dcols, xp.shape, k, stride, h_out, w_out)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            x._accumulate(dx)

    parents = (x, weight) if b is None else (x, weight, b)
    return _make(out_data, parents, backward, "conv2d")


def depthwise_conv2d(x, weight, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel 2-D cross-correlation (groups == channels); weight is (c, 1, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _require_4d(x, "depthwise_conv2d")
    n, c, h, w = x.data.shape
    if weight.data.ndim != 4 or weight.data.shape[1] != 1:
        raise ShapeError(f"depthwise weight must be (c, 1, k, k), got {weight.data.shape}")
    if weight.data.shape[0] != c:
        raise ShapeError(
            f"depthwise channel mismatch: input has {c} channels, weight has {weight.data.shape[0]}"
        )
    k = weight.data.shape[2]
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"depthwise kernel {k}x{k} does not fit input {h}x{w} with padding {padding}"
        )
    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    cols = _im2col(xp, k, stride, h_out, w_out)  # (n, c, k*k, L)
    wk = weight.data.reshape(c, k * k)
    out_data = np.einsum("cq,ncql->ncl", wk, cols, optimize=True).reshape(n, c, h_out, w_out)

    def backward(g):
        g3 = g.reshape(n, c, h_out * w_out)
        if weight.requires_grad or weight._prev:
            dw = np.einsum("ncl,ncql->cq", g3, cols, optimize=True)
            weight._accumulate(dw.reshape(weight.data.shape))
        if x.requires_grad or x._prev:
            dcols = wk[None, :, :, None] * g3[:, :, None, :]
            dxp = _col2im(dcols, xp.shape, k, stride, h_out, w_out)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            x._accumulate(dx)

    return _make(out_data, (x, weight), backward, "depthwise_conv2d")


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    training: bool = False,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with the batch's population statistics and
    folds them into the running buffers in place; eval mode applies the
    running buffers. Population (divide-by-N) variance is used throughout.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _require_4d(x, "batchnorm2d")
    c = x.data.shape[1]
    if eps <= 0:
        raise ValueError(f"batchnorm eps must be > 0, got {eps}")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm gamma/beta must have shape ({c},), got {gamma.data.shape}/{beta.data.shape}"
        )
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if beta.requires_grad or beta._prev:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad or gamma._prev:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad or x._prev:
            gs = g * gamma.data[None, :, None, None]
            if training:
                m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
                dx = (
                    gs
                    - gs.mean(axis=axes, keepdims=True)
                    - xhat * (gs * xhat).sum(axis=axes, keepdims=True) / m
                ) * inv_std[None, :, None, None]
            else:
                dx = gs * inv_std[None, :, None, None]
            x._accumulate(dx)

    return _make(out_data, (x, gamma, beta), backward, "batchnorm2d")


def maxpool2d(x, k: int, stride: int) -> Tensor:
    """Max over k*k windows; the gradient routes to each window's first argmax."""
    x = as_tensor(x)
    _require_4d(x, "maxpool2d")
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool k and stride must be >= 1, got k={k} stride={stride}")
    n, c, h, w = x.data.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool window {k}x{k} larger than input {h}x{w}")
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    xd = np.ascontiguousarray(x.data)
    sn, sc, sh, sw = xd.strides
    windows = as_strided(
        xd,
        shape=(n, c, h_out, w_out, k, k),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    flat = windows.reshape(n, c, h_out, w_out, k * k)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(xd)
        ni, ci, oi, oj = np.indices((n, c, h_out, w_out))
        ii = oi * stride + arg // k
        jj = oj * stride + arg % k
        np.add.at(dx, (ni, ci, ii, jj), g)
        x._accumulate(dx)

    return _make(np.ascontiguousarray(out_data), (x,), backward, "maxpool2d")


def upsample_nearest2x(x) -> Tensor:
    """Double height and width by replicating each cell."""
    x = as_tensor(x)
    _require_4d(x, "upsample_nearest2x")
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        n, c, h2, w2 = g.shape
        x._accumulate(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), backward, "upsample_nearest2x")


def concat_channels(tensors: Sequence) -> Tensor:
    """Stack feature maps along the channel axis in argument order."""
    parts = [as_tensor(t) for t in tensors]
    for p in parts:
        _require_4d(p, "concat_channels")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels needs matching (n, h, w); got {ref} vs {s}"
            )
    return concat(parts, axis=1)


def channel_shuffle(x, groups: int) -> Tensor:
    """Reorder channels by transposing the (groups, c/groups) view; pure permutation."""
    x = as_tensor(x)
    _require_4d(x, "channel_shuffle")
    c = x.data.shape[1]
    if c % groups != 0:
        raise ShapeError(f"channel_shuffle: {c} channels not divisible by groups={groups}")
    perm = np.arange(c).reshape(groups, c // groups).T.reshape(-1)
    inv = np.argsort(perm)
    out_data = np.ascontiguousarray(x.data[:, perm])

    def backward(g):
        x._accumulate(np.ascontiguousarray(g[:, inv]))

    return _make(out_data, (x,), backward, "channel_shuffle")


# ---------------------------------------------------------------------------
# gradient auditing
# ---------------------------------------------------------------------------


def grad_check(fn, inputs: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    Returns max over all components of |analytic - numeric| / max(1, |numeric|).
    Inputs should be float64; every component of every input is perturbed.
    Inputs that do not influence the output count as zero-gradient.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with finite_checks():
        out = fn(*inputs)
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued fn, got shape {out.data.shape}")
        out.backward()
    worst = 0.0
    with no_grad(), finite_checks():
        for t in inputs:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn(*inputs).item()
                flat[i] = orig - eps
                f_minus = fn(*inputs).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
