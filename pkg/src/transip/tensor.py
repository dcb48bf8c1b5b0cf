"""Minimal reverse-mode autodiff over float64 numpy buffers.

Implements exactly the operation set the potential model needs. Every
backward rule is itself written in tape operations, so a gradient computed
with ``create_graph=True`` is an ordinary graph node and can be
differentiated again (reverse-over-reverse). That is the only higher-order
mechanism in the engine.

A graph and its tensors are confined to one thread; distinct graphs are
independent. The recording flag is thread-local.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Tensor",
    "DifferentiableTensor",
    "ComputeGraph",
    "tensor",
    "constant",
    "no_grad",
    "matmul",
    "concat",
    "masked_softmax",
    "layer_norm",
    "gelu",
    "dropout",
    "linear",
    "grad",
]

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_TWO_OVER_SQRT_PI = float(2.0 / np.sqrt(np.pi))


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.recording = True


_STATE = _TapeState()


@contextmanager
def no_grad():
    """Turn off graph recording; operations return constant leaves."""
    prev = _STATE.recording
    _STATE.recording = False
    try:
        yield
    finally:
        _STATE.recording = prev


@contextmanager
def _recording(flag: bool):
    prev = _STATE.recording
    _STATE.recording = flag
    try:
        yield
    finally:
        _STATE.recording = prev


class Tensor:
    """A float64 n-d value, optionally attached to a compute graph.

    ``parents`` and ``vjps`` describe how to push an upstream gradient to
    each input; they are populated only while recording and only when some
    input requires a gradient.
    """

    __slots__ = ("data", "parents", "vjps", "requires_grad")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        vjps: tuple[Callable[["Tensor"], "Tensor"], ...] = (),
        requires_grad: bool = False,
    ) -> None:
        self.data = data
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad

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
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad_tag})"

    # -- arithmetic sugar ---------------------------------------------------

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def transpose_last(self) -> "Tensor":
        return transpose_last(self)

    def permute(self, axes: Sequence[int]) -> "Tensor":
        return permute(self, axes)

    def narrow(self, axis: int, start: int, size: int) -> "Tensor":
        return narrow(self, axis, start, size)

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return broadcast_to(self, shape)

    # -- reductions and elementwise -----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def abs(self) -> "Tensor":
        return absolute(self)

    def square(self) -> "Tensor":
        return square(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def erf(self) -> "Tensor":
        return erf(self)


DifferentiableTensor = Tensor


def tensor(values, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor from array-like data, validating finiteness."""
    data = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite values entering the compute graph")
    return Tensor(data, requires_grad=requires_grad)


def constant(values) -> Tensor:
    """Wrap trusted data as a non-differentiable leaf without copying."""
    return Tensor(np.asarray(values, dtype=np.float64))


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjps) -> Tensor:
    if _STATE.recording and any(p.requires_grad for p in parents):
        return Tensor(data, parents, tuple(vjps), requires_grad=True)
    return Tensor(data)


def _sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast result back to the shape of one operand."""
    if t.shape == tuple(shape):
        return t
    extra = t.ndim - len(shape)
    if extra > 0:
        t = t.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (have, want) in enumerate(zip(t.shape, shape)) if want == 1 and have != 1)
    if axes:
        t = t.sum(axis=axes, keepdims=True)
    if t.shape != tuple(shape):
        t = t.reshape(shape)
    return t


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data
    return _node(
        data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data
    return _node(
        data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(scale(g, -1.0), b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data
    return _node(
        data,
        (a, b),
        (lambda g: _sum_to(mul(g, b), a.shape), lambda g: _sum_to(mul(g, a), b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data
    return _node(
        data,
        (a, b),
        (
            lambda g: _sum_to(div(g, b), a.shape),
            lambda g: _sum_to(scale(div(mul(g, a), square(b)), -1.0), b.shape),
        ),
    )


def scale(t: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    data = t.data * factor
    return _node(data, (t,), (lambda g: scale(g, factor),))


def absolute(t: Tensor) -> Tensor:
    # Subgradient 0 at zero, matching np.sign.
    data = np.abs(t.data)
    return _node(data, (t,), (lambda g: mul(g, Tensor(np.sign(t.data))),))


def square(t: Tensor) -> Tensor:
    data = t.data * t.data
    return _node(data, (t,), (lambda g: scale(mul(g, t), 2.0),))


def sqrt(t: Tensor) -> Tensor:
    data = np.sqrt(t.data)
    out = _node(data, (t,), ())
    if out.requires_grad:
        out.vjps = (lambda g: scale(div(g, out), 0.5),)
    return out


def exp(t: Tensor) -> Tensor:
    data = np.exp(t.data)
    out = _node(data, (t,), ())
    if out.requires_grad:
        out.vjps = (lambda g: mul(g, out),)
    return out


def erf(t: Tensor) -> Tensor:
    data = _np_erf(t.data)
    return _node(
        data,
        (t,),
        (lambda g: mul(g, scale(exp(scale(square(t), -1.0)), _TWO_OVER_SQRT_PI)),),
    )


# -- shape operations ---------------------------------------------------------


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = t.data.reshape(shape)
    return _node(data, (t,), (lambda g: reshape(g, t.shape),))


def transpose_last(t: Tensor) -> Tensor:
    """Swap the last two axes."""
    if t.ndim < 2:
        raise ValueError("transpose_last needs at least two axes")
    data = np.swapaxes(t.data, -1, -2)
    return _node(data, (t,), (lambda g: transpose_last(g),))


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(t.data, axes)
    return _node(data, (t,), (lambda g: permute(g, inverse),))


def broadcast_to(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(t.data, shape)
    return _node(data, (t,), (lambda g: _sum_to(g, t.shape),))


def narrow(t: Tensor, axis: int, start: int, size: int) -> Tensor:
    axis = axis % t.ndim
    index = [slice(None)] * t.ndim
    index[axis] = slice(start, start + size)
    data = t.data[tuple(index)]
    after = t.shape[axis] - start - size
    return _node(data, (t,), (lambda g: pad_axis(g, axis, start, after),))


def pad_axis(t: Tensor, axis: int, before: int, after: int) -> Tensor:
    axis = axis % t.ndim
    widths = [(0, 0)] * t.ndim
    widths[axis] = (before, after)
    data = np.pad(t.data, widths)
    return _node(data, (t,), (lambda g: narrow(g, axis, before, t.shape[axis]),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    vjps = []
    offset = 0
    for t in tensors:
        width = t.shape[axis]
        vjps.append(lambda g, a=axis, o=offset, w=width: narrow(g, a, o, w))
        offset += width
    return _node(data, tensors, vjps)


# -- reductions ---------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, t.ndim)
    data = np.asarray(t.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g: Tensor) -> Tensor:
        gg = g
        if not keepdims:
            kept = tuple(1 if i in axes else s for i, s in enumerate(t.shape))
            gg = gg.reshape(kept)
        return gg.broadcast_to(t.shape)

    return _node(data, (t,), (vjp,))


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, t.ndim)
    count = 1
    for a in axes:
        count *= t.shape[a]
    return scale(reduce_sum(t, axis=axis, keepdims=keepdims), 1.0 / count)


# -- matrix product -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data
    return _node(
        data,
        (a, b),
        (
            lambda g: _sum_to(matmul(g, transpose_last(b)), a.shape),
            lambda g: _sum_to(matmul(transpose_last(a), g), b.shape),
        ),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x @ weight + bias."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# -- neural-network primitives ------------------------------------------------


def masked_softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an additive {0, -inf} mask.

    Fully masked rows return zeros (not NaN) and propagate zero gradient
    into their logits. The max shift is exact: softmax is invariant to
    per-row constants, so detaching it does not change any derivative.
    """
    x = logits.data
    if mask is None:
        valid = np.ones(x.shape, dtype=bool)
        z = x
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
        valid = mask_b == 0.0
        if not np.all(valid | np.isneginf(mask_b)):
            raise ValueError("mask entries must be 0 or -inf")
        z = np.where(valid, x, -np.inf)
    zmax = np.max(np.where(valid, z, -np.inf), axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(valid, np.exp(np.where(valid, z - zmax, 0.0)), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    y = e / np.where(total == 0.0, 1.0, total)

    out = _node(y, (logits,), ())
    if out.requires_grad:

        def vjp(g: Tensor) -> Tensor:
            inner = reduce_sum(mul(g, out), axis=-1, keepdims=True)
            return mul(sub(g, inner), out)

        out.vjps = (vjp,)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine.

    A zero-variance row maps to the bias (zeros under the default affine):
    eps keeps the denominator positive.
    """
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    variance = reduce_mean(square(centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(variance, eps)))
    return add(mul(normed, gain), bias)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    return scale(mul(x, add(erf(scale(x, _INV_SQRT2)), 1.0)), 0.5)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Inverted dropout; pass-through when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(x, Tensor(keep))


# -- reverse-mode driver ------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children order over the differentiable subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


@dataclass
class ComputeGraph:
    """Topologically ordered view of the differentiable nodes reaching an output."""

    nodes: list[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        return cls(_topo_order(output))


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar output with respect to each tensor in wrt.

    Tensors that do not participate in the output's graph (or were created
    without requires_grad) get a zero gradient, not an error. With
    ``create_graph`` the returned tensors are differentiable, which is what
    lets a force-matching loss backpropagate into model weights.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        order = _topo_order(output)
        with _recording(create_graph):
            grads[id(output)] = Tensor(np.ones_like(output.data))
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None:
                    continue
                for parent, vjp in zip(node.parents, node.vjps):
                    if not parent.requires_grad:
                        continue
                    piece = vjp(g)
                    held = grads.get(id(parent))
                    grads[id(parent)] = piece if held is None else add(held, piece)
    results = []
    for w in wrt:
        g = grads.get(id(w))
        results.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return results
