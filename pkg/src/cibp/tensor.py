"""Dense tensors with a minimal reverse-mode autodiff tape.

Every primitive here is a pure function of its inputs.  When gradient
recording is enabled and at least one input requires a gradient, the output
remembers its parents and a closure mapping the output gradient to the
parent gradients.  ``Tensor.backward`` walks that graph in reverse
topological order.

Conventions: relu'(0) = 0, abs'(0) = 0, sign(0) = 0.  There is no implicit
broadcasting except ``scalar * Tensor``; batch and channel alignment is
spelled out by the fused primitives (``linear``, ``conv2d``,
``channel_affine``).
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "abs",
    "add",
    "channel_affine",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "default_dtype",
    "get_default_dtype",
    "is_grad_enabled",
    "linear",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "select",
    "sigmoid",
    "square",
    "sub",
    "sum",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the float type new tensors are created with."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or not isinstance(data, (np.ndarray, np.generic)):
            # numpy float arrays keep their precision; Python numbers take the default
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs(self)

    def square(self):
        return square(self)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list:
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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c: float) -> Tensor:
    """Scalar times tensor; the only broadcast allowed."""
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def abs(a) -> Tensor:
    a = _as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def square(a) -> Tensor:
    a = _as_tensor(a)
    two = a.dtype.type(2)
    return _make(a.data * a.data, (a,), lambda g: (g * two * a.data,), "square")


def select(mask, a, b) -> Tensor:
    """``where(mask, a, b)`` with a constant boolean mask of the same shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "select")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"select: mask shape {mask.shape} vs {a.shape}")
    zero = a.dtype.type(0)
    return _make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (np.where(mask, g, zero), np.where(mask, zero, g)),
        "select",
    )


# -- reductions and shape --------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    return _make(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),), "sum")


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axis), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


# -- affine maps -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Dense layer ``x W^T + b`` for ``x`` of shape [in] or [batch, in]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: shape mismatch {x.shape} x {weight.shape}^T")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape}, expected ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ weight.data, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, backward, "linear")


def channel_affine(x, scale_, shift) -> Tensor:
    """Per-channel ``x * scale + shift`` on [C,H,W] or [N,C,H,W]; scale/shift are constants."""
    x = _as_tensor(x)
    scale_ = np.asarray(scale_, dtype=x.dtype)
    shift = np.asarray(shift, dtype=x.dtype)
    c = x.shape[-3]
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_affine: expected ({c},) coefficients, got {scale_.shape}/{shift.shape}")
    s = scale_.reshape(c, 1, 1)
    t = shift.reshape(c, 1, 1)
    return _make(x.data * s + t, (x,), lambda g: (g * s,), "channel_affine")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on [C,H,W] or [N,C,H,W] inputs (no kernel flip)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [C_out, C_in, k, k], got {kernel.shape}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    cout, cin, k, _ = kernel.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if conv_output_size(h, k, stride, padding) < 1 or conv_output_size(w, k, stride, padding) < 1:
        raise ShapeError(
            f"conv2d: non-positive output size for input {x.shape}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    cols, ho, wo = _im2col(xd, k, stride, padding)
    kmat = kernel.data.reshape(cout, -1)
    out = cols @ kmat.T
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = (gmat.T @ cols).reshape(kernel.shape)
        dcols = (gmat @ kmat).reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding:
            dx = dx[:, :, padding:-padding, padding:-padding]
        grads = [dx[0] if single else dx, dk]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


# -- loss ------------------------------------------------------------------


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of [N] or [batch, N] logits against class indices."""
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [N] or [batch, N], got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: {y.shape[0]} labels for {z.shape[0]} rows")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise IndexError(f"cross_entropy: class index out of range [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, y]
    if reduction == "mean":
        out, w = losses.mean(), 1.0 / z.shape[0]
    elif reduction == "sum":
        out, w = losses.sum(), 1.0
    elif reduction == "none":
        out, w = (losses[0] if single else losses), None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, y] -= 1
        if w is None:
            p *= np.reshape(g, (-1, 1))
        else:
            p *= g * w
        return (p[0] if single else p,)

    return _make(np.asarray(out, dtype=logits.dtype), (logits,), backward, "cross_entropy")
