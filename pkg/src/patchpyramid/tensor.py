"""Dense float64 tensors with a reverse-mode autodiff tape.

Every operation records a node on a thread-local tape when gradients are
enabled; ``backward`` replays the tape in exact reverse construction order
and accumulates gradients additively into every contributing tensor.
Values are immutable after construction (only ``grad`` buffers and
optimizer-driven parameter updates mutate arrays), which keeps reshape
views safe to share.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError


class _AutogradState(threading.local):
    def __init__(self):
        self.enabled = True
        self.tape = []


_STATE = _AutogradState()


class Tensor:
    """A dense f64 array plus autodiff bookkeeping.

    ``requires_grad`` marks either a trainable leaf or an intermediate
    produced by a recorded operation; ``grad`` holds the accumulated
    gradient after ``backward`` and always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


def _record(out: Tensor, inputs, grad_fn) -> None:
    out.requires_grad = True
    _STATE.tape.append(_Node(out, inputs, grad_fn))


def record_op(out_data: np.ndarray, inputs, grad_fn) -> Tensor:
    """Wrap a custom fused operation as one tape node.

    ``grad_fn(g)`` must return one gradient (or None) per input, aligned
    with ``inputs``.  No node is recorded when gradients are disabled or no
    input participates in the graph.
    """
    out = Tensor(out_data)
    if _tracing(*inputs):
        _record(out, inputs, grad_fn)
    return out


def _tracing(*tensors) -> bool:
    if not _STATE.enabled:
        return False
    for t in tensors:
        if t.requires_grad:
            return True
    return False


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation mode)."""
    prev = _STATE.enabled
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def grad_enabled() -> bool:
    return _STATE.enabled


def reset_tape() -> None:
    _STATE.tape.clear()


def tape_length() -> int:
    return len(_STATE.tape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor contributing to the scalar loss.

    Visits the tape in exact reverse construction order; a tensor feeding
    several consumers receives the sum of their contributions.  The tape
    is consumed by the call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = _STATE.tape
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        g = node.out.grad
        if g is None:
            continue
        grads = node.grad_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is None:
                continue
            if t.grad is None:
                t.grad = gt
            else:
                # Allocate rather than mutate: deposited arrays may alias
                # gradients still needed by other nodes.
                t.grad = t.grad + gt
        node.out.grad = None
    tape.clear()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_constant(value):
    """Wrap plain numbers/arrays as non-differentiable tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def add(a, b) -> Tensor:
    a = _as_constant(a)
    b = _as_constant(b)
    out = Tensor(a.data + b.data)
    if _tracing(a, b):
        ash, bsh = a.data.shape, b.data.shape

        def grad_fn(g):
            ga = _unbroadcast(g, ash) if a.requires_grad else None
            gb = _unbroadcast(g, bsh) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), grad_fn)
    return out


def sub(a, b) -> Tensor:
    a = _as_constant(a)
    b = _as_constant(b)
    out = Tensor(a.data - b.data)
    if _tracing(a, b):
        ash, bsh = a.data.shape, b.data.shape

        def grad_fn(g):
            ga = _unbroadcast(g, ash) if a.requires_grad else None
            gb = _unbroadcast(-g, bsh) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), grad_fn)
    return out


def mul(a, b) -> Tensor:
    a = _as_constant(a)
    b = _as_constant(b)
    out = Tensor(a.data * b.data)
    if _tracing(a, b):
        ash, bsh = a.data.shape, b.data.shape

        def grad_fn(g):
            ga = _unbroadcast(g * b.data, ash) if a.requires_grad else None
            gb = _unbroadcast(g * a.data, bsh) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), grad_fn)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    if _tracing(a):
        _record(out, (a,), lambda g: (-g,))
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    if _tracing(a):
        _record(out, (a,), lambda g: (2.0 * g * a.data,))
    return out


def abs_(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    if _tracing(a):
        _record(out, (a,), lambda g: (g * np.sign(a.data),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Leading batch axes follow numpy broadcasting; the common cases here are
    equal batch extents and a 2-D weight applied to a batched operand.
    """
    a = _as_constant(a)
    b = _as_constant(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}")
    try:
        out_data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents disagree: {a.data.shape} x {b.data.shape}") from exc
    out = Tensor(out_data)
    if _tracing(a, b):
        ash, bsh = a.data.shape, b.data.shape

        def grad_fn(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), ash)
            if b.requires_grad:
                if b.data.ndim == 2 and g.ndim > 2:
                    # 2-D weight against a batched operand: one dgemm.
                    k = ash[-1]
                    n = g.shape[-1]
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, bsh)
            return ga, gb

        _record(out, (a, b), grad_fn)
    return out


def linear_array(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Forward kernel shared by the tensor op and the no-grad fast path."""
    f_in, f_out = weight.shape
    x2 = x.reshape(-1, f_in)
    out = x2 @ weight
    out += bias
    return out.reshape(x.shape[:-1] + (f_out,)), x2


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W + b over the last axis, differentiable in all three."""
    f_in, f_out = weight.data.shape
    if x.data.shape[-1] != f_in:
        raise ShapeError(f"linear: input feature extent {x.data.shape} does not match weight {weight.data.shape}")
    if bias.data.shape != (f_out,):
        raise ShapeError(f"linear: bias shape {bias.data.shape} does not match weight {weight.data.shape}")
    out_data, x2 = linear_array(x.data, weight.data, bias.data)
    out = Tensor(out_data)
    if _tracing(x, weight, bias):

        def grad_fn(g):
            g2 = g.reshape(-1, f_out)
            gx = (g2 @ weight.data.T).reshape(x.data.shape) if x.requires_grad else None
            gw = x2.T @ g2 if weight.requires_grad else None
            gb = g2.sum(axis=0) if bias.requires_grad else None
            return gx, gw, gb

        _record(out, (x, weight, bias), grad_fn)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if _tracing(x):
        _record(out, (x,), lambda g: (g * (out.data > 0.0),))
    return out


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stabilized softmax on a plain array; all -inf slices come back zero."""
    m = x.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        # A fully masked (-inf) slice would produce nan via inf - inf.
        e = np.exp(x - np.where(np.isneginf(m), 0.0, m))
        denom = e.sum(axis=axis, keepdims=True)
        return e / np.where(denom == 0.0, 1.0, denom)
    e = np.exp(x - m)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``.

    The per-slice maximum is subtracted before exponentiation.  Slices that
    are entirely -inf are defined to produce all-zero output (the additive
    -1e30 mask sentinel never triggers this; it simply underflows to 0).
    """
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    out = Tensor(softmax_array(x.data, axis))
    if _tracing(x):

        def grad_fn(g):
            s = out.data
            inner = (g * s).sum(axis=axis, keepdims=True)
            return ((g - inner) * s,)

        _record(out, (x,), grad_fn)
    return out


def layer_norm_array(xd: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Last-axis standardization kernel; returns (out, xhat, istd)."""
    inv_n = 1.0 / xd.shape[-1]
    mean = xd.sum(axis=-1, keepdims=True)
    mean *= inv_n
    centered = xd - mean
    var = (centered * centered).sum(axis=-1, keepdims=True)
    var *= inv_n
    istd = 1.0 / np.sqrt(var + eps)
    xhat = centered * istd
    out = xhat * gain
    out += bias
    return out, xhat, istd


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Per-slice standardization along ``axis`` followed by gain and bias."""
    n = x.data.shape[axis]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias must have length {n} (axis {axis} of {x.data.shape})"
        )
    moved = axis not in (-1, x.data.ndim - 1)
    xd = np.moveaxis(x.data, axis, -1) if moved else x.data
    inv_n = 1.0 / n
    out_d, xhat, istd = layer_norm_array(xd, gain.data, bias.data, eps)
    out = Tensor(np.moveaxis(out_d, -1, axis) if moved else out_d)
    if _tracing(x, gain, bias):

        def grad_fn(g):
            gd = np.moveaxis(g, axis, -1) if moved else g
            gxhat = gd * gain.data
            gx = ggain = gbias = None
            if x.requires_grad:
                gx = istd * (
                    gxhat
                    - inv_n * gxhat.sum(axis=-1, keepdims=True)
                    - xhat * (inv_n * (gxhat * xhat).sum(axis=-1, keepdims=True))
                )
                if moved:
                    gx = np.moveaxis(gx, -1, axis)
            if gain.requires_grad:
                ggain = (gd * xhat).reshape(-1, n).sum(axis=0)
            if bias.requires_grad:
                gbias = gd.reshape(-1, n).sum(axis=0)
            return gx, ggain, gbias

        _record(out, (x, gain, bias), grad_fn)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Identity in evaluation mode and at rate 0 (no tape node recorded).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded rng")
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.data.shape) >= rate).astype(np.float64)
    mask *= scale
    out = Tensor(x.data * mask)
    if _tracing(x):
        _record(out, (x,), lambda g: (g * mask,))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if _tracing(x):
        xsh = x.data.shape
        _record(out, (x,), lambda g: (g.reshape(xsh),))
    return out


def swap_last_axes(x: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(x.data, -1, -2))
    if _tracing(x):
        _record(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))
    return out


def expand_batch(x: Tensor, batch: int) -> Tensor:
    """Tile a tensor along a new leading batch axis; grads sum back."""
    out = Tensor(np.broadcast_to(x.data, (batch,) + x.data.shape).copy())
    if _tracing(x):
        _record(out, (x,), lambda g: (g.sum(axis=0),))
    return out


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    if _tracing(x):
        inv = 1.0 / x.data.size
        xsh = x.data.shape
        _record(out, (x,), lambda g: (np.full(xsh, float(g) * inv),))
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    if _tracing(x):
        xsh = x.data.shape
        _record(out, (x,), lambda g: (np.full(xsh, float(g)),))
    return out


def parameter(shape, rng: np.random.Generator, fan_in: int | None = None) -> Tensor:
    """Trainable tensor initialized uniformly in +-sqrt(1/fan_in)."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_parameter(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_parameter(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
