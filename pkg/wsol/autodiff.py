"""
Reverse-mode automatic differentiation over double-precision numpy arrays.

Operations executed while a ``Tape`` is active are recorded on it when any of
their inputs requires a gradient; ``backward`` replays the recording in exact
reverse order and returns a ``GradientMap`` for the requires-grad leaves.
Outside a tape every operation is a plain forward computation.

Tensors are immutable: their buffers are read-only and gradients are never
stored on them.
"""

from __future__ import annotations

from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import get_settings
from .exceptions import (
    ContractError,
    DimensionError,
    LabelIndexError,
    NumericalInstabilityError,
    TapeStateError,
)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("wsol_active_tape", default=None)


class Tensor:
    """N-dimensional float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        array = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        array.setflags(write=False)
        self.data: np.ndarray = array
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        if not array.flags.c_contiguous:
            array = np.array(array, order="C")
        array.setflags(write=False)
        out.data = array
        out.requires_grad = requires_grad
        out.node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError("item", f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs, its output and its vector-Jacobian product."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP
    tape: "Tape"


class GradientMap:
    """Accumulated gradients of the requires-grad leaves reached by a backward pass."""

    def __init__(self, grads: Dict[int, np.ndarray], leaves: Dict[int, Tensor]):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._grads.get(id(tensor))
        if grad is None or self._leaves.get(id(tensor)) is not tensor:
            return np.zeros(tensor.shape)
        return grad

    def __contains__(self, tensor: object) -> bool:
        return isinstance(tensor, Tensor) and self._leaves.get(id(tensor)) is tensor

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._leaves.values())

    def __len__(self) -> int:
        return len(self._leaves)


class Tape:
    """Ordered record of operations; usable as a context manager, replayable once."""

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.consumed = False
        self._tokens: List = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> GradientMap:
        if self.consumed:
            raise TapeStateError("backward already ran on this tape; record a new one")
        if loss.size != 1:
            raise ContractError("backward", f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True

        grads: Dict[int, np.ndarray] = {}
        leaves: Dict[int, Tensor] = {}
        if loss.node is not None:
            grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.vjp(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad
                if tensor.node is None:
                    leaves[key] = tensor
        return GradientMap({k: grads[k] for k in leaves}, leaves)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> GradientMap:
    """Run reverse-mode accumulation for a scalar loss on the tape that recorded it."""
    tape = loss.node.tape if loss.node is not None else _ACTIVE_TAPE.get()
    if tape is None:
        raise TapeStateError("no tape is active and the loss was not recorded")
    return tape.backward(loss)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(array: np.ndarray) -> Tensor:
    """Wrap an array as a tensor that never takes part in gradients."""
    return Tensor._wrap(array, requires_grad=False)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    if get_settings().debug and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NumericalInstabilityError(op)
    out = Tensor._wrap(data, requires_grad=tracked)
    if tracked:
        node = Node(op, tuple(inputs), out, vjp, tape)
        out.node = node
        tape.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, "operands do not broadcast", (a.shape, b.shape))


# Elementwise arithmetic
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return _make(
        "div", a.data / b.data, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; ``b`` may be a single-channel mask broadcast over channels."""
    same = a.shape == b.shape
    channel_mask = (
        a.ndim == 4 and b.ndim == 4 and b.shape[1] == 1
        and a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:]
    )
    if not (same or channel_mask):
        raise DimensionError("mul_elementwise", "expected equal shapes or a single-channel mask", (a.shape, b.shape))
    return mul(a, b)


def detach(x: Tensor) -> Tensor:
    """Same values, cut out of the gradient graph."""
    return Tensor._wrap(x.data, requires_grad=False)


# Reductions and indexing
def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    out = x.data.mean(axis=axis)
    count = x.size // max(np.size(out), 1)

    def vjp(g):
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded, x.shape) / count,)

    return _make("mean", np.asarray(out), (x,), vjp)


def select_class(x: Tensor, classes: Sequence[int]) -> Tensor:
    """Per-row channel slice: [N, C, ...] -> [N, 1, ...] picking channel classes[n]."""
    idx = np.asarray(classes, dtype=np.int64)
    if x.ndim < 2 or idx.shape != (x.shape[0],):
        raise DimensionError("select_class", "need one class per row of an [N, C, ...] tensor", (x.shape, idx.shape))
    for label in idx:
        if not 0 <= label < x.shape[1]:
            raise LabelIndexError(int(label), x.shape[1])
    rows = np.arange(x.shape[0])

    def vjp(g):
        grad = np.zeros(x.shape)
        grad[rows, idx] = g[:, 0]
        return (grad,)

    return _make("select_class", x.data[rows, idx][:, None], (x,), vjp)


# Activations
def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _make("relu", np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty(x.shape)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError("softmax", "expected [N, C] scores", (x.shape,))
    out = _softmax_rows(x.data)
    return _make(
        "softmax", out, (x,),
        lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),),
    )


def cross_entropy_from_scores(scores: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean of logsumexp(scores) - scores[label], i.e. -ln softmax(scores)[label]."""
    if scores.ndim != 2:
        raise DimensionError("cross_entropy_from_scores", "expected [N, C] scores", (scores.shape,))
    n, c = scores.shape
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    if idx.shape != (n,):
        raise DimensionError("cross_entropy_from_scores", "one label per row required", (scores.shape, idx.shape))
    for label in idx:
        if not 0 <= label < c:
            raise LabelIndexError(int(label), c)
    rows = np.arange(n)
    peak = scores.data.max(axis=1)
    lse = peak + np.log(np.exp(scores.data - peak[:, None]).sum(axis=1))
    loss = np.mean(lse - scores.data[rows, idx])

    def vjp(g):
        grad = _softmax_rows(scores.data)
        grad[rows, idx] -= 1.0
        return (grad * (g / n),)

    return _make("cross_entropy", np.asarray(loss), (scores,), vjp)


# Spatial operations
def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Ci,H,W] with [Co,Ci,kh,kw] plus per-channel bias."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d", "expected 4-d input and weight", (x.shape, weight.shape))
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if ci != wci:
        raise DimensionError("conv2d", f"input has {ci} channels, weight expects {wci}", (x.shape, weight.shape))
    if bias.shape != (co,):
        raise DimensionError("conv2d", "bias must have one value per output channel", (bias.shape, weight.shape))
    if stride < 1:
        raise ContractError("conv2d", f"stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError("conv2d", "kernel larger than padded input", (x.shape, weight.shape))

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # [N, Ho, Wo, Ci*kh*kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
    kernel = weight.data.reshape(co, -1)
    out = (cols @ kernel.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def vjp(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        d_weight = (g_rows.T @ cols).reshape(weight.shape)
        d_bias = g.sum(axis=(0, 2, 3))
        d_cols = (g_rows @ kernel).reshape(n, ho, wo, ci, kh, kw)
        d_padded = np.zeros(padded.shape)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        d_x = d_padded[:, :, padding:padding + h, padding:padding + w]
        return d_x, d_weight, d_bias

    return _make("conv2d", out, (x, weight, bias), vjp)


def avg_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Mean over k x k windows; with k == stride the input must tile exactly."""
    if x.ndim != 4:
        raise DimensionError("avg_pool2d", "expected [N, C, H, W]", (x.shape,))
    n, c, h, w = x.shape
    if k == stride:
        if h % k or w % k:
            raise DimensionError("avg_pool2d", f"spatial size {h}x{w} not divisible by {k}", (x.shape,))
        out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return _make(
            "avg_pool2d", out, (x,),
            lambda g: (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),),
        )

    if k > h or k > w or stride < 1:
        raise DimensionError("avg_pool2d", f"window {k} / stride {stride} invalid for {h}x{w}", (x.shape,))
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = windows.mean(axis=(4, 5))
    ho, wo = out.shape[2:]

    def vjp(g):
        grad = np.zeros(x.shape)
        share = g / (k * k)
        for i in range(k):
            for j in range(k):
                grad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (grad,)

    return _make("avg_pool2d", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N, C, H, W] -> [N, C]."""
    if x.ndim != 4:
        raise DimensionError("global_avg_pool", "expected [N, C, H, W]", (x.shape,))
    area = x.shape[2] * x.shape[3]
    return _make(
        "global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),),
    )


def _interpolation_matrix(size_out: int, size_in: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape [size_out, size_in]."""
    weights = np.zeros((size_out, size_in))
    if size_in == 1:
        weights[:, 0] = 1.0
        return weights
    scale = (size_in - 1) / (size_out - 1) if size_out > 1 else 0.0
    pos = np.arange(size_out) * scale
    lo = np.minimum(np.floor(pos).astype(np.int64), size_in - 2)
    frac = pos - lo
    rows = np.arange(size_out)
    weights[rows, lo] = 1.0 - frac
    weights[rows, lo + 1] += frac
    return weights


def bilinear_upsample(x: Tensor, height: int, width: int) -> Tensor:
    """Corner-aligned bilinear resize of [N, C, h, w] to [N, C, height, width]."""
    if x.ndim != 4:
        raise DimensionError("bilinear_upsample", "expected [N, C, h, w]", (x.shape,))
    h, w = x.shape[2:]
    if height < h or width < w:
        raise ContractError("bilinear_upsample", f"target {height}x{width} smaller than input {h}x{w}")
    rows = _interpolation_matrix(height, h)
    cols = _interpolation_matrix(width, w)
    out = rows @ x.data @ cols.T
    return _make("bilinear_upsample", out, (x,), lambda g: (rows.T @ g @ cols,))
