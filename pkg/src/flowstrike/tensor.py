"""Dense tensors with reverse-mode automatic differentiation on numpy storage.

The engine is deliberately small: float32 by default, broadcasting restricted
to scalar-vs-tensor and equal shapes, and a closure-per-op backward pass over
a topologically sorted graph. Everything the classifiers, white-box attackers
and the invertible flow need is expressed through the ops defined here.
"""

from __future__ import annotations

import ctypes
import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


def _tune_allocator() -> None:
    # Conv-heavy loops churn multi-MB temporaries; glibc hands those out via
    # mmap and every first touch page-faults. Raising the mmap/trim thresholds
    # keeps the buffers on the heap for reuse (roughly 2x on training steps).
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


_tune_allocator()

__all__ = [
    "Tensor",
    "Prng",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "zeros",
    "ones",
    "elementwise",
    "concat",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "bias_add",
    "scale_axis",
    "channel_mix",
    "channel_mix_inverse",
    "nearest_resize",
    "softmax_cross_entropy",
    "logabsdet",
    "finite_diff_grad",
    "zero_grads",
]

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Switch storage precision globally (float32 default, float64 for oracles)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / data prep)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional float array, optionally tracked for reverse-mode gradients.

    Forward data is immutable after construction by convention; only leaf
    parameter `.data` may be rewritten between graph builds (optimizer steps,
    actnorm initialization). `.grad` accumulates additively across backward
    calls until `zero_grad()`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        # float64 passes through untouched so oracles can run in 64-bit;
        # everything else lands on the default dtype.
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # ---- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy); treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})\n{self.data!r}"

    # ---- autograd core -------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, fresh: bool) -> None:
        # `fresh` marks arrays allocated by the calling closure; shared arrays
        # (views of the output gradient) must be copied before they become a
        # mutable accumulator.
        if self.grad is None:
            self.grad = g if fresh else g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; populates grad on tracked leaves."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad += np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # ---- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- method forms of common ops -------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def abs(self):
        return absval(self)

    def sign(self):
        return sign(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def relu(self):
        return clamp(self, 0.0, None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return tensor_sum(self) * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)


# ---- construction helpers ------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(
        f"shapes {a.shape} and {b.shape} are not broadcastable "
        "(only scalar-vs-tensor and equal shapes are supported)"
    )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Gradient for the size-1 operand of a broadcasted binary op.
    if g.shape == shape:
        return g
    return np.sum(g, dtype=g.dtype).reshape(shape)


# ---- elementwise binary ops -----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape), fresh=a.shape != g.shape)
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape), fresh=b.shape != g.shape)

    return _from_op(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape), fresh=a.shape != g.shape)
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.shape), fresh=True)

    return _from_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape), fresh=True)

    return _from_op(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    if np.any(b.data == 0):
        raise ValueError("division by zero")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g / b.data, a.shape), fresh=True)
        if b.requires_grad:
            b._accumulate(_reduce_to(-g * out_data / b.data, b.shape), fresh=True)

    return _from_op(out_data, (a, b), backward)


# ---- elementwise unary ops --------------------------------------------------


def neg(a) -> Tensor:
    a = _coerce(a)
    out_data = -a.data

    def backward(g):
        a._accumulate(-g, fresh=True)

    return _from_op(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data, fresh=True)

    return _from_op(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    out_data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data, fresh=True)

    return _from_op(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def backward(g):
        # Gradient defined for strictly positive inputs only.
        a._accumulate(g * (0.5 / out_data), fresh=True)

    return _from_op(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data), fresh=True)

    return _from_op(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data), fresh=True)

    return _from_op(out_data, (a,), backward)


def absval(a) -> Tensor:
    a = _coerce(a)
    out_data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data), fresh=True)

    return _from_op(out_data, (a,), backward)


def sign(a) -> Tensor:
    # sign(0) = 0; derivative is zero almost everywhere, treated as constant.
    a = _coerce(a)
    out_data = np.sign(a.data)

    def backward(g):
        a._accumulate(np.zeros_like(a.data), fresh=True)

    return _from_op(out_data, (a,), backward)


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _coerce(a)
    if lo is None and hi is None:
        raise ValueError("clamp needs at least one bound")
    out_data = np.clip(a.data, lo, hi)

    def backward(g):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        a._accumulate(g * mask, fresh=True)

    return _from_op(out_data, (a,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "abs": absval,
    "sign": sign,
    "clamp": clamp,
}


def elementwise(op_tag: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch an elementwise op by tag (binary tags take `b`)."""
    try:
        fn = _ELEMENTWISE[op_tag]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_tag!r}") from None
    if op_tag in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op_tag} needs a second operand")
        return fn(a, b)
    if op_tag == "clamp":
        return fn(a, **kwargs)
    return fn(a)


# ---- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape), fresh=False)

    return _from_op(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse), fresh=False)

    return _from_op(out_data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    a = _coerce(a)
    if not 0 <= start and start + length <= a.shape[axis]:
        raise ValueError("narrow out of range")
    idx = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(a.ndim)
    )
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full, fresh=True)

    return _from_op(out_data, (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = tuple(
                    slice(offset, offset + n) if d == axis else slice(None)
                    for d in range(p.ndim)
                )
                p._accumulate(g[idx], fresh=False)
            offset += n

    return _from_op(out_data, tuple(parts), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            grown = np.broadcast_to(g.reshape((1,) * a.ndim), a.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            shape = list(a.shape)
            for ax in axes:
                shape[ax % a.ndim] = 1
            grown = np.broadcast_to(g.reshape(shape), a.shape)
        a._accumulate(grown, fresh=False)

    return _from_op(out_data, (a,), backward)


# ---- linear algebra / NN ops -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T, fresh=True)
        if b.requires_grad:
            b._accumulate(a.data.T @ g, fresh=True)

    return _from_op(out_data, (a, b), backward)


def bias_add(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a 1-D bias along `axis` of x (e.g. channel bias on [N,C,H,W])."""
    x, b = _coerce(x), _coerce(b)
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ValueError(f"bias of shape {b.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = b.shape[0]
    out_data = x.data + b.data.reshape(view)
    other_axes = tuple(d for d in range(x.ndim) if d != axis)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g, fresh=False)
        if b.requires_grad:
            b._accumulate(g.sum(axis=other_axes), fresh=True)

    return _from_op(out_data, (x, b), backward)


def scale_axis(x: Tensor, s: Tensor, axis: int) -> Tensor:
    """Multiply x by a 1-D scale along `axis`."""
    x, s = _coerce(x), _coerce(s)
    if s.ndim != 1 or s.shape[0] != x.shape[axis]:
        raise ValueError(f"scale of shape {s.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = s.shape[0]
    s_view = s.data.reshape(view)
    out_data = x.data * s_view
    other_axes = tuple(d for d in range(x.ndim) if d != axis)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * s_view, fresh=True)
        if s.requires_grad:
            s._accumulate((g * x.data).sum(axis=other_axes), fresh=True)

    return _from_op(out_data, (x, s), backward)


_NHWC_MIN_CHANNELS = 8


def _conv2d_raw(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Cross-correlation via im2col GEMM.

    Two column layouts: channel-major for few channels (long W-runs when
    copying), and NHWC patches for many channels (long C-runs). The choice
    only affects speed; both return identical results and a col matrix the
    backward pass reuses for the weight gradient.
    """
    n, c = x.shape[0], x.shape[1]
    cout, _, kh, kw = w.shape
    xp = (
        np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x
    )
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if c >= _NHWC_MIN_CHANNELS:
        xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
        s0, s1, s2, s3 = xh.strides
        windows = np.lib.stride_tricks.as_strided(
            xh,
            shape=(n, ho, wo, kh, kw, c),
            strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
            writeable=False,
        )
        col = windows.reshape(n * ho * wo, kh * kw * c)
        w_mat = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, cout)
        out = (col @ w_mat).reshape(n, ho, wo, cout)
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        return out, col, "nhwc"
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False,
    )
    col = windows.reshape(c * kh * kw, n * ho * wo)
    out = w.reshape(cout, -1) @ col
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    return out, col, "cmajor"


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    n, c, h, w = g.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=g.dtype)
    out[:, :, ::stride, ::stride] = g
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw]."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ValueError("kernel larger than padded input")
    out_data, col, layout = _conv2d_raw(x.data, w.data, stride, padding)

    def backward(g):
        n, cout, ho, wo = g.shape
        if w.requires_grad:
            if layout == "nhwc":
                g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
                gw = (col.T @ g_mat).reshape(kh, kw, x.shape[1], cout)
                gw = np.ascontiguousarray(gw.transpose(3, 2, 0, 1))
            else:
                g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
                gw = (g_mat @ col.T).reshape(w.shape)
            w._accumulate(gw, fresh=True)
        if x.requires_grad:
            # grad wrt input: full correlation of the stride-dilated output
            # gradient with the spatially flipped, in/out-swapped kernel.
            gd = _dilate(g, stride)
            wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx_core, _, _ = _conv2d_raw(gd, wflip, stride=1, padding=kh - 1)
            h, wd = x.shape[2], x.shape[3]
            hp, wp = h + 2 * padding, wd + 2 * padding
            gxp = np.zeros((n, x.shape[1], hp, wp), dtype=g.dtype)
            gxp[:, :, : gx_core.shape[2], : gx_core.shape[3]] = gx_core
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
            x._accumulate(np.ascontiguousarray(gx), fresh=True)

    return _from_op(out_data, (x, w), backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    x = _coerce(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"spatial dims {h}x{w} not divisible by pool size {k}")
    # Strided-slice accumulation; reducing over the tiny window axes directly
    # is an order of magnitude slower.
    acc = x.data[:, :, ::k, ::k].copy()
    for u in range(k):
        for v in range(k):
            if u or v:
                acc += x.data[:, :, u::k, v::k]
    out_data = acc / (k * k)

    def backward(g):
        gx = np.empty_like(x.data)
        scaled = g / (k * k)
        for u in range(k):
            for v in range(k):
                gx[:, :, u::k, v::k] = scaled
        x._accumulate(gx, fresh=True)

    return _from_op(out_data, (x,), backward)


def channel_mix(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel channel mixing y[n,i,h,w] = sum_j w[i,j] x[n,j,h,w]."""
    x, w = _coerce(x), _coerce(w)
    c = x.shape[1]
    if w.shape != (c, c):
        raise ValueError(f"mixing matrix {w.shape} does not fit {c} channels")
    n, _, h, wd = x.shape
    xm = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    out_data = np.ascontiguousarray(
        (w.data @ xm).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
    )

    def backward(g):
        if x.requires_grad:
            gm = g.transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (w.data.T @ gm).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            x._accumulate(np.ascontiguousarray(gx), fresh=True)
        if w.requires_grad:
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
            w._accumulate(gw.astype(g.dtype, copy=False), fresh=True)

    return _from_op(out_data, (x, w), backward)


def channel_mix_inverse(x: Tensor, w: Tensor) -> Tensor:
    """Per-pixel mixing by the inverse matrix, y = w^{-1} x, differentiable in w."""
    x, w = _coerce(x), _coerce(w)
    c = x.shape[1]
    if w.shape != (c, c):
        raise ValueError(f"mixing matrix {w.shape} does not fit {c} channels")
    inv = np.linalg.inv(w.data.astype(np.float64)).astype(w.dtype)
    n, _, h, wd = x.shape
    xm = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    out_data = np.ascontiguousarray(
        (inv @ xm).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
    )

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(c, -1)
        if x.requires_grad:
            gx = (inv.T @ gm).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            x._accumulate(np.ascontiguousarray(gx), fresh=True)
        if w.requires_grad:
            # y = w^{-1} x  =>  dL/dw = -w^{-T} (dL/dy) y^T
            gy_yt = np.tensordot(g, out_data, axes=([0, 2, 3], [0, 2, 3]))
            w._accumulate(-(inv.T @ gy_yt).astype(g.dtype, copy=False), fresh=True)

    return _from_op(out_data, (x, w), backward)


def nearest_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbor spatial resize of x[N,C,H,W] to (H', W')."""
    x = _coerce(x)
    ho, wo = size
    h, w = x.shape[2], x.shape[3]
    rows = (np.arange(ho) * h) // ho
    cols = (np.arange(wo) * w) // wo
    out_data = np.ascontiguousarray(x.data[:, :, rows[:, None], cols[None, :]])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        x._accumulate(gx, fresh=True)

    return _from_op(out_data, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0,{k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    log_softmax = (z - m) - np.log(sez)
    out_data = np.asarray(-log_softmax[np.arange(n), labels].mean(), dtype=z.dtype)

    def backward(g):
        sm = ez / sez
        sm[np.arange(n), labels] -= 1.0
        logits._accumulate(sm * (float(g) / n), fresh=True)

    return _from_op(out_data, (logits,), backward)


def logabsdet(w: Tensor) -> Tensor:
    """log|det W| of a square matrix, with gradient W^{-T}."""
    w = _coerce(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"logabsdet needs a square matrix, got {w.shape}")
    sign_det, lad = np.linalg.slogdet(w.data.astype(np.float64))
    if sign_det == 0:
        raise ValueError("singular matrix in logabsdet")
    out_data = np.asarray(lad, dtype=w.dtype)

    def backward(g):
        grad = np.linalg.inv(w.data.astype(np.float64)).T * float(g)
        w._accumulate(grad.astype(w.dtype), fresh=True)

    return _from_op(out_data, (w,), backward)


# ---- verification oracle -----------------------------------------------------


def finite_diff_grad(f, x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of a scalar-valued f at x. Test oracle only."""
    if not 1e-4 <= h <= 1e-2:
        raise ValueError(f"step {h} outside [1e-4, 1e-2]")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)))
        flat[i] = orig - h
        fm = float(f(Tensor(base)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---- deterministic randomness --------------------------------------------------


def _path_key(parts) -> tuple[int, ...]:
    key = []
    for part in parts:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf-8")))
        else:
            key.append(int(part))
    return tuple(key)


class Prng:
    """Seedable deterministic generator (PCG64): same seed, same sequence."""

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._ss))

    @classmethod
    def from_path(cls, seed: int, *path) -> "Prng":
        """Stateless named substream: same (seed, path) always gives the same Prng."""
        return cls(np.random.SeedSequence(int(seed), spawn_key=_path_key(path)))

    def spawn(self, n: int) -> list["Prng"]:
        return [Prng(ss) for ss in self._ss.spawn(n)]

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape=None) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.float64)
        return np.asarray(out, dtype=_DEFAULT_DTYPE)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        out = self._gen.uniform(low, high, size=shape)
        return np.asarray(out, dtype=_DEFAULT_DTYPE)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_signs(self, shape) -> np.ndarray:
        """Uniform draws from {-1, +1}."""
        bits = self._gen.integers(0, 2, size=shape)
        return (bits * 2 - 1).astype(_DEFAULT_DTYPE)
