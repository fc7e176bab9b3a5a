"""Minimal dense tensors with reverse-mode automatic differentiation.

Only the operations the CRNN needs are provided. Image operations accept an
optional leading batch axis (``N×C×H×W``) in addition to the single-image
``C×H×W`` layout so that a whole mini-batch shares one graph.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A node in the computation graph.

    ``data`` holds the forward value, ``grad`` the accumulated gradient of the
    current backward pass (same shape as ``data``).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # operator sugar used by the recurrent cells
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, "mul", (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * factor)

    return _result(a.data * factor, "scale", (a,), backward)


def bias_add(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x`` (the only broadcast supported)."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        _accumulate(x, g)
        _accumulate(bias, g.sum(axis=reduce_axes))

    return _result(x.data + bias.data.reshape(view), "bias_add", (x, bias), backward)


def _relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(g):
        # derivative at exactly 0 is pinned to 0
        _accumulate(x, g * (x.data > 0))

    return _result(out, "relu", (x,), backward)


def _tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return _result(out, "tanh", (x,), backward)


def _sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, "sigmoid", (x,), backward)


_ACTIVATIONS = {"relu": _relu, "tanh": _tanh, "sigmoid": _sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def relu(x: Tensor) -> Tensor:
    return _relu(x)


def tanh(x: Tensor) -> Tensor:
    return _tanh(x)


def sigmoid(x: Tensor) -> Tensor:
    return _sigmoid(x)


def one_minus(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, -g)

    return _result(1.0 - x.data, "one_minus", (x,), backward)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.array(x.data.sum()), "sum", (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _result(np.array(x.data.mean()), "mean", (x,), backward)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(out, "reshape", (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,), backward)


def index(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[i] += g

    return _result(x.data[i], "index", (x,), backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[..., start:stop]``."""

    def backward(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[..., start:stop] += g

    return _result(np.ascontiguousarray(x.data[..., start:stop]), "slice", (x,), backward)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(xs, parts):
            _accumulate(t, part)

    return _result(np.stack([t.data for t in xs], axis=axis), "stack", xs, backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in xs], axis=axis), "concat", xs, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` for a 2-D ``x``."""
    out = matmul(x, weight)
    return bias_add(out, bias) if bias is not None else out


def log_softmax_rows(x: Tensor) -> Tensor:
    """Normalize the last axis so that every row logsumexps to zero."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"log_softmax_rows: need at least one column, got {x.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        _accumulate(x, g - probs * g.sum(axis=-1, keepdims=True))

    return _result(out, "log_softmax", (x,), backward)


# ---------------------------------------------------------------- image ops


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected C×H×W or N×C×H×W input, got {x.shape}")


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation (kernels are not flipped).

    ``x`` is ``C_in×H×W`` or ``N×C_in×H×W``; ``kernels`` is ``C_out×C_in×kh×kw``.
    """
    xb, single = _as_batch(x, "conv2d")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be C_out×C_in×kh×kw, got {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    n, c, h, w = xb.shape
    c_out, c_in, kh, kw = kernels.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernels {kernels.shape} expect {c_in}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than padded input {x.shape} (padding {padding})")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo); columns: (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if single:
        out = out[0]

    def backward(g):
        gb = g[None] if single else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        if kernels.requires_grad:
            _accumulate(kernels, (gmat.T @ cols).reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            h_span = stride * (ho - 1) + 1
            w_span = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + h_span:stride, j:j + w_span:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            _accumulate(x, dx[0] if single else dx)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, "conv2d", parents, backward)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window maximum; ties route the gradient to the first row-major position."""
    stride = window if stride is None else stride
    xb, single = _as_batch(x, "max_pool2d")
    n, c, h, w = xb.shape
    if window < 1 or stride < 1:
        raise ValueError(f"max_pool2d: invalid window={window} stride={stride}")
    if window > h or window > w:
        raise ShapeError(f"max_pool2d: window {window} exceeds input extent {x.shape}")
    ho = pool_output_size(h, window, stride)
    wo = pool_output_size(w, window, stride)
    if stride == window:
        return _max_pool_tiled(x, xb, single, window, ho, wo)
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        gb = g[None] if single else g
        rows = (np.arange(ho) * stride)[None, None, :, None] + arg // window
        cols = (np.arange(wo) * stride)[None, None, None, :] + arg % window
        nn_ = np.broadcast_to(np.arange(n)[:, None, None, None], arg.shape)
        cc = np.broadcast_to(np.arange(c)[None, :, None, None], arg.shape)
        dx = np.zeros_like(xb)
        np.add.at(dx, (nn_, cc, rows, cols), gb)
        _accumulate(x, dx[0] if single else dx)

    return _result(np.ascontiguousarray(out), "max_pool2d", (x,), backward)


def _max_pool_tiled(x: Tensor, xb: np.ndarray, single: bool, k: int, ho: int, wo: int) -> Tensor:
    # non-overlapping windows: compare the k*k strided sub-grids directly
    offsets = [(i, j) for i in range(k) for j in range(k)]
    views = [xb[:, :, i:i + k * ho:k, j:j + k * wo:k] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def backward(g):
        gb = g[None] if single else g
        dx = np.zeros_like(xb)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = (v == out) & ~taken
            taken |= hit
            dx[:, :, i:i + k * ho:k, j:j + k * wo:k] = gb * hit
        _accumulate(x, dx[0] if single else dx)

    return _result(out[0] if single else out, "max_pool2d", (x,), backward)


# ---------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Leaf ``.grad`` fields are reset and then filled with the gradient of
    ``root``; intermediate gradients are released once consumed. Returns a map
    from every leaf that requires a gradient (or the given ``params``) to its
    gradient array.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar-valued, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("backward: root does not depend on any tensor requiring gradients")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    leaves: list[Tensor] = []
    for node in reversed(order):
        if node._backward is None:
            leaves.append(node)
            continue
        g = node.grad
        if g is not None:
            node._backward(g)
        node.grad = None
    wanted = list(params) if params is not None else leaves
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in wanted}
