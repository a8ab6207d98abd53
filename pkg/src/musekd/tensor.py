"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation records
its parents and a closure mapping the output gradient to parent gradients;
:meth:`Tensor.backward` walks that record in reverse topological order.

Tensors default to float32. Gradient checks switch to float64 with
:func:`default_dtype`.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32

# Forward outputs are checked for NaN when MUSE_DEBUG is set.
DEBUG = bool(os.environ.get("MUSE_DEBUG"))

_grad_enabled = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """n-dimensional array with optional gradient tracking.

    ``grad`` is populated on leaf tensors (parameters and inputs created by
    the user) after :meth:`backward`. Gradients accumulate across backward
    calls until :meth:`zero_grad`.
    """

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, cut from the graph. Gradients never flow through it."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, wiring it into the graph when any parent needs grad."""
    if DEBUG and np.isnan(data).any():
        raise FloatingPointError("NaN produced by forward op")
    out = Tensor(data)
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Detached tensors terminate the walk, so anything upstream of them simply
    receives no gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))
    return _make(out, (x,), lambda g: (g * (out > 0),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    x = _as_tensor(x)
    out = softplus_np(x.data)
    return _make(out, (x,), lambda g: (g * sigmoid_np(x.data),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def take(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays or ints, not Tensors")
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bw)


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight stored as [out, in]."""
    if x.ndim != 2:
        raise ValueError(f"linear expects input [N, D], got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(
            f"linear dimension mismatch: input has D={x.shape[1]}, weight is {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight rows {weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, bw)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Rows of (kh, kw, C) patches from an NCHW-shaped array.

    Work happens in channels-last memory so patch copies move contiguous
    channel runs. Returns the column matrix and the output size.
    """
    xh = x.transpose(0, 2, 3, 1)
    n, h, w, c = xh.shape
    if kh == 1 and kw == 1 and padding == 0:
        xs = xh[:, ::stride, ::stride, :]
        oh, ow = xs.shape[1], xs.shape[2]
        return xs.reshape(n * oh * ow, c), oh, ow
    if padding:
        xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
        xp[:, padding : padding + h, padding : padding + w, :] = xh
    else:
        xp = xh
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return cols, oh, ow


def _col2im(dcols, x_shape, kh, kw, stride, padding, oh, ow):
    n, c, h, w = x_shape
    if kh == 1 and kw == 1 and padding == 0:
        if stride == 1:
            return dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dx = np.zeros((n, h, w, c), dtype=dcols.dtype)
        dx[:, ::stride, ::stride, :] = dcols.reshape(n, oh, ow, c)
        return dx.transpose(0, 3, 1, 2)
    dcols = dcols.reshape(n, oh, ow, kh, kw, c)
    dx = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += dcols[:, :, :, i, j, :]
    if padding:
        dx = dx[:, padding : padding + h, padding : padding + w, :]
    return dx.transpose(0, 3, 1, 2)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation via im2col and a single matrix multiply.

    Results are NCHW-shaped views over channels-last memory; numpy handles the
    strides transparently and the next convolution gets its layout for free.
    """
    if stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4:
        raise ValueError(f"conv2d expects input [N, C, H, W], got {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d expects weight [O, C, kH, kW], got {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if c != wc:
        raise ValueError(f"conv2d channel mismatch: input has C={c}, weight expects C={wc}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")

    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dx = None
        if x.requires_grad:
            dx = _col2im(gmat @ wmat, x.shape, kh, kw, stride, padding, oh, ow)
        dw = None
        if weight.requires_grad:
            dw = (gmat.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        grads = [dx, dw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return _make(out, parents, bw)


def channel_dot(x: Tensor, v: Tensor) -> Tensor:
    """[N, C, H, W] . [N, C] -> [N, H, W]: per-location dot product with a per-sample vector."""
    if x.ndim != 4 or v.ndim != 2 or x.shape[:2] != v.shape:
        raise ValueError(f"channel_dot shape mismatch: {x.shape} vs {v.shape}")
    n, c, h, w = x.shape
    xm = x.data.transpose(0, 2, 3, 1).reshape(n, h * w, c)
    out = np.matmul(xm, v.data[:, :, None]).reshape(n, h, w)

    def bw(g):
        gm = g.reshape(n, h * w, 1)
        dx = (gm * v.data[:, None, :]).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        dv = np.matmul(g.reshape(n, 1, h * w), xm).reshape(n, c)
        return dx, dv

    return _make(out, (x, v), bw)


# ---------------------------------------------------------------------------
# pooling and normalization
# ---------------------------------------------------------------------------


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ValueError(f"max_pool2d expects [N, C, H, W], got {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ValueError(f"pool kernel {kernel} larger than input {x.shape[2:]}")
    n, c, h, w = x.shape
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros_like(x.data)
        ki, kj = np.divmod(arg, kernel)
        rows = np.arange(oh)[None, None, :, None] * stride + ki
        cols = np.arange(ow)[None, None, None, :] * stride + kj
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn_, cc, rows, cols), g)
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    return mean(x, axis=(2, 3))


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, like most frameworks).
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm affine params must have shape ({c},)")
    # statistics over an (N*H*W, C) matrix in channels-last memory
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    m = x2.shape[0]

    def to_nchw(a):
        return a.reshape(n, h, w, c).transpose(0, 3, 1, 2)

    if training:
        mu = x2.mean(axis=0)
        xc = x2 - mu
        var = np.einsum("ij,ij->j", xc, xc) / m
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = xc * inv
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x2 - running_mean.astype(x.dtype)) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c)
        dgamma = np.einsum("ij,ij->j", g2, xhat)
        dbeta = g2.sum(axis=0)
        if training:
            scale_ = gamma.data * inv / m
            dx = (m * g2 - dbeta - xhat * dgamma) * scale_
        else:
            dx = g2 * (gamma.data * inv)
        return to_nchw(dx), dgamma, dbeta

    return _make(to_nchw(out), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# probabilities
# ---------------------------------------------------------------------------


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = log_softmax_np(x.data, axis=axis)
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)
