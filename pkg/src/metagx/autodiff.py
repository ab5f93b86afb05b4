"""Dense float64 tensors with reverse-mode automatic differentiation.

Forward math runs eagerly on numpy arrays. When any operand is registered on
a Tape, the operation is recorded so that ``backward`` can sweep the tape once
in reverse creation order and hand back one gradient per watched leaf. Node
ids are creation-ordered, so parents always precede children and a single
reversed pass visits every node exactly once.

One tape serves one forward/backward cycle: training loops build a fresh tape
per step and drop it afterwards. Tensors that never touch a tape behave like
plain numpy containers with zero bookkeeping cost.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError

Array = np.ndarray

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "pad_last",
    "mean",
    "reduce_sum",
    "log",
    "clamp",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "conv1d",
    "max_pool1d",
    "bce_loss",
]


class Tensor:
    """A dense float64 array, optionally recorded on a Tape.

    ``data`` is always a numpy float64 array. ``tape``/``node`` are set only
    for tensors produced by (or watched on) a tape; constants carry None.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node}"
        return f"Tensor(shape={self.data.shape}{tag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "vjp", "shape")

    def __init__(self, parents, vjp, shape):
        self.parents = parents
        self.vjp = vjp
        self.shape = shape


class Tape:
    """Ordered op record for one forward/backward cycle.

    ``watch`` registers a leaf whose gradient ``backward`` must report, even
    when the loss never touches it (the gradient is then zero). A tape is
    consumed by its backward pass; recording onto it afterwards is an error.
    """

    __slots__ = ("_nodes", "_watched", "_consumed")

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: list[int] = []
        self._consumed = False

    def watch(self, values) -> Tensor:
        """Register a parameter leaf and return its tape-bound tensor."""
        data = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
        node = self._push((), None, data.shape)
        self._watched.append(node)
        return Tensor(data, tape=self, node=node)

    def _push(self, parents, vjp, shape) -> int:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward; build a fresh tape")
        self._nodes.append(_Node(tuple(parents), vjp, shape))
        return len(self._nodes) - 1


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep: gradients of a scalar loss for every watched leaf.

    Returns a map from leaf node id (as handed out by ``Tape.watch``) to the
    gradient tensor, shaped like the leaf. Leaves the loss never reached get
    exact zeros. The loss must be a 0-d tensor recorded on a tape.
    """
    if loss.tape is None or loss.node is None:
        raise ValueError("backward requires a tensor recorded on a tape")
    if loss.data.ndim != 0:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = loss.tape
    if tape._consumed:
        raise RuntimeError("tape already consumed by backward; build a fresh tape")
    tape._consumed = True

    nodes = tape._nodes
    grads: list[Array | None] = [None] * len(nodes)
    grads[loss.node] = np.ones((), dtype=np.float64)
    for nid in range(loss.node, -1, -1):
        g = grads[nid]
        node = nodes[nid]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None or pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg

    out: dict[int, Tensor] = {}
    for nid in tape._watched:
        g = grads[nid]
        if g is None:
            g = np.zeros(nodes[nid].shape, dtype=np.float64)
        out[nid] = Tensor(np.asarray(g, dtype=np.float64))
    return out


# ---------------------------------------------------------------------------
# op plumbing


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def _record(parents: Sequence[Tensor], out: Array, make_vjp: Callable) -> Tensor:
    """Record one op if any parent sits on a tape; else return a constant.

    ``make_vjp(needs)`` builds the vector-Jacobian closure; ``needs[i]`` tells
    it whether parent ``i`` is tracked, so it can skip dead gradient work by
    returning None in that slot.
    """
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(out)
    needs = tuple(p.node is not None for p in parents)
    vjp = make_vjp(needs)
    node = tape._push((p.node for p in parents), vjp, out.shape)
    return Tensor(out, tape=tape, node=node)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def make_vjp(needs):
        ashape, bshape = a.data.shape, b.data.shape

        def vjp(g):
            ga = _unbroadcast(g, ashape) if needs[0] else None
            gb = _unbroadcast(g, bshape) if needs[1] else None
            return ga, gb

        return vjp

    return _record((a, b), out, make_vjp)


def sub(a, b) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def make_vjp(needs):
        ashape, bshape = a.data.shape, b.data.shape

        def vjp(g):
            ga = _unbroadcast(g, ashape) if needs[0] else None
            gb = _unbroadcast(-g, bshape) if needs[1] else None
            return ga, gb

        return vjp

    return _record((a, b), out, make_vjp)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def make_vjp(needs):
        adata, bdata = a.data, b.data

        def vjp(g):
            ga = _unbroadcast(g * bdata, adata.shape) if needs[0] else None
            gb = _unbroadcast(g * adata, bdata.shape) if needs[1] else None
            return ga, gb

        return vjp

    return _record((a, b), out, make_vjp)


def neg(a) -> Tensor:
    """Elementwise negation."""
    a = _lift(a)

    def make_vjp(needs):
        def vjp(g):
            return (-g,)

        return vjp

    return _record((a,), -a.data, make_vjp)


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes, batch dims broadcast.

    Both operands must have ndim >= 2 and matching inner dimensions.
    """
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul needs operands with ndim >= 2, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    out = a.data @ b.data

    def make_vjp(needs):
        adata, bdata = a.data, b.data

        def vjp(g):
            ga = gb = None
            if needs[0]:
                ga = _unbroadcast(g @ np.swapaxes(bdata, -1, -2), adata.shape)
            if needs[1]:
                gb = _unbroadcast(np.swapaxes(adata, -1, -2) @ g, bdata.shape)
            return ga, gb

        return vjp

    return _record((a, b), out, make_vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _lift(a)
    if a.data.ndim < 2:
        raise DimensionError(f"transpose needs ndim >= 2, got shape {a.data.shape}")

    def make_vjp(needs):
        def vjp(g):
            return (np.swapaxes(g, -1, -2),)

        return vjp

    return _record((a,), np.swapaxes(a.data, -1, -2), make_vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    """Reshape without copying semantics; total size must be preserved."""
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.data.shape} to {shape}: {exc}") from None

    def make_vjp(needs):
        old = a.data.shape

        def vjp(g):
            return (g.reshape(old),)

        return vjp

    return _record((a,), out, make_vjp)


def pad_last(a, count: int) -> Tensor:
    """Append ``count`` zeros along the last axis."""
    a = _lift(a)
    if count < 0:
        raise ValueError(f"pad count must be >= 0, got {count}")
    if count == 0:
        return a
    width = [(0, 0)] * (a.data.ndim - 1) + [(0, count)]
    out = np.pad(a.data, width)

    def make_vjp(needs):
        keep = a.data.shape[-1]

        def vjp(g):
            return (g[..., :keep],)

        return vjp

    return _record((a,), out, make_vjp)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def mean(a, axis: int | None = None) -> Tensor:
    """Arithmetic mean over one axis, or over all elements when axis is None."""
    a = _lift(a)
    if axis is None:
        out = a.data.mean()

        def make_vjp(needs):
            shape, n = a.data.shape, a.data.size

            def vjp(g):
                return (np.broadcast_to(g / n, shape),)

            return vjp

        return _record((a,), out, make_vjp)

    ax = _normalize_axis(axis, a.data.ndim)
    out = a.data.mean(axis=ax)

    def make_vjp(needs):
        shape, n = a.data.shape, a.data.shape[ax]

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g / n, ax), shape),)

        return vjp

    return _record((a,), out, make_vjp)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over all elements when axis is None."""
    a = _lift(a)
    if axis is None:
        out = a.data.sum()

        def make_vjp(needs):
            shape = a.data.shape

            def vjp(g):
                return (np.broadcast_to(g, shape),)

            return vjp

        return _record((a,), out, make_vjp)

    ax = _normalize_axis(axis, a.data.ndim)
    out = a.data.sum(axis=ax)

    def make_vjp(needs):
        shape = a.data.shape

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape),)

        return vjp

    return _record((a,), out, make_vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def log(a) -> Tensor:
    """Natural logarithm; inputs must be strictly positive."""
    a = _lift(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    out = np.log(a.data)

    def make_vjp(needs):
        adata = a.data

        def vjp(g):
            return (g / adata,)

        return vjp

    return _record((a,), out, make_vjp)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is 1 strictly inside, 0 at/beyond the rails."""
    a = _lift(a)
    if not lo < hi:
        raise ValueError(f"clamp requires lo < hi, got [{lo}, {hi}]")
    out = np.clip(a.data, lo, hi)

    def make_vjp(needs):
        inside = (a.data > lo) & (a.data < hi)

        def vjp(g):
            return (g * inside,)

        return vjp

    return _record((a,), out, make_vjp)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    """max(x, slope*x) with 0 < slope < 1; the gradient at exactly 0 is 1."""
    a = _lift(a)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    nonneg = a.data >= 0
    out = np.where(nonneg, a.data, slope * a.data)

    def make_vjp(needs):
        factor = np.where(nonneg, 1.0, slope)

        def vjp(g):
            return (g * factor,)

        return vjp

    return _record((a,), out, make_vjp)


def _sigmoid_values(x: Array) -> Array:
    out = np.empty_like(x)
    nonneg = x >= 0
    out[nonneg] = 1.0 / (1.0 + np.exp(-x[nonneg]))
    ex = np.exp(x[~nonneg])
    out[~nonneg] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    """Logistic function, computed on the overflow-free branch per sign."""
    a = _lift(a)
    out = _sigmoid_values(a.data)

    def make_vjp(needs):
        def vjp(g):
            return (g * out * (1.0 - out),)

        return vjp

    return _record((a,), out, make_vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along one axis; rows sum to 1."""
    a = _lift(a)
    ax = _normalize_axis(axis, a.data.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=ax, keepdims=True)

    def make_vjp(needs):
        def vjp(g):
            inner = (g * out).sum(axis=ax, keepdims=True)
            return (out * (g - inner),)

        return vjp

    return _record((a,), out, make_vjp)


# ---------------------------------------------------------------------------
# structured ops


def _promote_conv_input(x: Tensor, what: str) -> tuple[Array, bool]:
    if x.data.ndim == 2:
        return x.data[np.newaxis], False
    if x.data.ndim == 3:
        return x.data, True
    raise DimensionError(
        f"{what} expects [channels, length] or [batch, channels, length], got {x.data.shape}"
    )


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation: out[b,o,j] = sum_{c,k} w[o,c,k] * x[b,c,j*stride+k-padding].

    ``x`` is [channels, length] or [batch, channels, length]; ``w`` is
    [out_channels, in_channels, width]. Zero padding is applied to both ends.
    """
    x, w = _lift(x), _lift(w)
    if stride < 1:
        raise ValueError(f"conv1d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv1d padding must be >= 0, got {padding}")
    if w.data.ndim != 3:
        raise DimensionError(f"conv1d weight must be [out, in, width], got {w.data.shape}")
    x3, batched = _promote_conv_input(x, "conv1d")
    c_out, c_in, width = w.data.shape
    if x3.shape[1] != c_in:
        raise DimensionError(
            f"conv1d channel mismatch: input has {x3.shape[1]}, weight expects {c_in}"
        )
    length = x3.shape[2]
    padded_len = length + 2 * padding
    if padded_len < width:
        raise DimensionError(
            f"conv1d window {width} exceeds padded length {padded_len}"
        )
    xp = np.pad(x3, ((0, 0), (0, 0), (padding, padding))) if padding else x3
    windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=2)[:, :, ::stride]
    out3 = np.einsum("bcjk,ock->boj", windows, w.data)
    out = out3 if batched else out3[0]

    def make_vjp(needs):
        out_len = out3.shape[2]

        def vjp(g):
            g3 = g if batched else g[np.newaxis]
            gx = gw = None
            if needs[1]:
                gw = np.einsum("boj,bcjk->ock", g3, windows)
            if needs[0]:
                gwin = np.einsum("boj,ock->bcjk", g3, w.data)
                gxp = np.zeros_like(xp)
                for k in range(width):
                    gxp[:, :, k : k + stride * out_len : stride] += gwin[:, :, :, k]
                gx = gxp[:, :, padding : padding + length] if padding else gxp
                if not batched:
                    gx = gx[0]
            return gx, gw

        return vjp

    return _record((x, w), out, make_vjp)


def max_pool1d(x, size: int, stride: int) -> Tensor:
    """Max over sliding windows along the last axis; ties keep the first index.

    ``x`` is [channels, length] or [batch, channels, length]; the window must
    fit at least once.
    """
    x = _lift(x)
    if size < 1:
        raise ValueError(f"max_pool1d size must be >= 1, got {size}")
    if stride < 1:
        raise ValueError(f"max_pool1d stride must be >= 1, got {stride}")
    x3, batched = _promote_conv_input(x, "max_pool1d")
    length = x3.shape[2]
    if length < size:
        raise DimensionError(f"max_pool1d window {size} exceeds length {length}")
    windows = np.lib.stride_tricks.sliding_window_view(x3, size, axis=2)[:, :, ::stride]
    out3 = windows.max(axis=3)
    arg = windows.argmax(axis=3)
    out = out3 if batched else out3[0]

    def make_vjp(needs):
        nb, nc, nw = arg.shape

        def vjp(g):
            g3 = g if batched else g[np.newaxis]
            gx = np.zeros_like(x3)
            pos = np.arange(nw) * stride + arg
            bidx = np.arange(nb)[:, None, None]
            cidx = np.arange(nc)[None, :, None]
            np.add.at(gx, (bidx, cidx, pos), g3)
            return (gx if batched else gx[0],)

        return vjp

    return _record((x,), out, make_vjp)


# ---------------------------------------------------------------------------
# loss

_BCE_EPS = 1e-7


def bce_loss(pred, label) -> Tensor:
    """Mean binary cross-entropy over a 1-D batch of probabilities.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs so that hard
    0/1 scores stay finite; labels must be exactly 0 or 1. Built from recorded
    primitives, so it differentiates like any other op.
    """
    pred, label = _lift(pred), _lift(label)
    if pred.data.ndim != 1 or label.data.ndim != 1:
        raise DimensionError(
            f"bce_loss expects 1-D inputs, got {pred.data.shape} and {label.data.shape}"
        )
    if pred.data.shape != label.data.shape:
        raise DimensionError(
            f"bce_loss length mismatch: {pred.data.shape} vs {label.data.shape}"
        )
    if pred.data.size == 0:
        raise DimensionError("bce_loss requires a non-empty batch")
    if not np.all((label.data == 0.0) | (label.data == 1.0)):
        raise ValueError("bce_loss labels must be exactly 0 or 1")
    p = clamp(pred, _BCE_EPS, 1.0 - _BCE_EPS)
    pos = mul(label, log(p))
    negt = mul(sub(1.0, label), log(sub(1.0, p)))
    return neg(mean(add(pos, negt)))
