"""Dense tensors with reverse-mode automatic differentiation.

The execution model is a gradient tape.  While a :class:`Tape` is active,
every differentiable operation appends one node (inputs, output, backward
rule) to it.  Forward execution order is already a topological order of
the data flow, so :func:`backward` walks the node list in reverse exactly
once, pushing gradients from the loss towards every leaf that wants them.
Gradients accumulate; they are never overwritten, so calling backward
twice without clearing doubles the stored gradients.

A global precision switch selects float32 (training) or float64 (gradient
checking) for newly created leaf tensors.  Operations inherit the dtype of
their inputs, so a graph built from double leaves stays double end to end.

The tape stack is thread-local: independent model replicas may run forward
and backward concurrently as long as they do not share a tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

from .errors import (
    BroadcastError,
    DetachedGraphError,
    InvalidAxisError,
    NonFiniteError,
    NonScalarLossError,
    ShapeError,
)

_DTYPES = {"single": np.float32, "double": np.float64}
_PRECISION = "single"
_CHECK_FINITE = False

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def set_precision(mode: str) -> None:
    """Select the dtype used for newly created leaf tensors."""
    global _PRECISION
    if mode not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {mode!r}")
    _PRECISION = mode


def get_precision() -> str:
    return _PRECISION


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_PRECISION])


@contextmanager
def precision(mode: str):
    """Temporarily switch the global precision (used by gradient checks)."""
    global _PRECISION
    old = _PRECISION
    set_precision(mode)
    try:
        yield
    finally:
        _PRECISION = old


def set_check_finite(enabled: bool) -> None:
    """Debug assertion: raise NonFiniteError whenever an op emits NaN/Inf."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    """A dense n-dimensional array, optionally tracking gradients.

    Tensors built directly (leaves) are cast to the current default dtype
    and stored contiguously.  Tensors produced by operations keep their
    computed dtype.  Data is treated as immutable once an op has consumed
    it; only the optimizer rewrites leaf ``data``, between recorded steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=default_dtype())
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @classmethod
    def _from_op(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = object.__new__(cls)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced NaN or Inf")
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.is_leaf = False
        return out

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, with gradients off."""
        out = object.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.is_leaf = True
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Small amount of operator sugar; layer code mostly calls the op
    # functions directly, but scalar arithmetic reads better infix.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs, out, backward):
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of one forward pass, consumed by :func:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, out: Tensor, inputs: tuple, backward) -> None:
        self.nodes.append(_Node(inputs, out, backward))
        self._produced.add(id(out))


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf.

    The loss must be a scalar produced on ``tape``.  Intermediate gradients
    are summed over all uses of a value; leaves accumulate across calls.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be a scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise DetachedGraphError("loss was not produced by an op recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in tape._produced:
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + gi


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _record_op(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(np.asarray(out_data), requires)
    tape = active_tape()
    if requires and tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise BroadcastError(
            f"shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise InvalidAxisError(f"axis {axis} out of range for a {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record_op(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record_op(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record_op(out, (a, b), bw)


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    out = x.data * factor

    def bw(g):
        return (g * factor,)

    return _record_op(out, (x,), bw)


def neg(x) -> Tensor:
    return scale(x, -1.0)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _record_op(out, (x,), bw)


def reciprocal(x) -> Tensor:
    """1/x elementwise.  The caller guarantees x is nonzero."""
    x = _as_tensor(x)
    out = 1.0 / x.data

    def bw(g):
        return (-g * out * out,)

    return _record_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}") from None
    in_shape = x.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return _record_op(out, (x,), bw)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise InvalidAxisError(f"axes {axes} is not a permutation of 0..{x.ndim - 1}")
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _record_op(out, (x,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = _normalize_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim:
            raise ShapeError("concat operands must share rank")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat extents differ off-axis: {[t.shape for t in tensors]}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _record_op(out, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(_normalize_axis(int(a), ndim) for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _axis_tuple(axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)
    in_shape = x.shape

    def bw(g):
        gg = g
        if ax is not None and not keepdims:
            for a in sorted(ax):
                gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg, in_shape),)

    return _record_op(out, (x,), bw)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    ax = _axis_tuple(axis, x.ndim)
    out = x.data.mean(axis=ax, keepdims=keepdims)
    in_shape = x.shape
    count = x.size if ax is None else int(np.prod([in_shape[a] for a in ax]))

    def bw(g):
        gg = g
        if ax is not None and not keepdims:
            for a in sorted(ax):
                gg = np.expand_dims(gg, a)
        return (np.broadcast_to(gg, in_shape) / count,)

    return _record_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and nonlinearities


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects two matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _record_op(out, (a, b), bw)


def softmax(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    axis = _normalize_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record_op(s, (x,), bw)


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + _erf(d * _INV_SQRT2))
    out = d * cdf

    def bw(g):
        pdf = np.exp(-0.5 * d * d) * _INV_SQRT_2PI
        return (g * (cdf + d * pdf),)

    return _record_op(out, (x,), bw)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis of an NCHW tensor, then scale/shift.

    Statistics are per (sample, row, column) position; ``gain`` and
    ``shift`` are per-channel vectors.
    """
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    if x.ndim != 4:
        raise ShapeError(f"layer_norm expects an NCHW tensor, got shape {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"gain/shift must have shape ({c},), got {gain.shape} and {shift.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd
    gcol = gain.data.reshape(1, c, 1, 1)
    out = xhat * gcol + shift.data.reshape(1, c, 1, 1)

    def bw(g):
        gxhat = g * gcol
        m1 = gxhat.mean(axis=1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
        gx = invstd * (gxhat - m1 - xhat * m2)
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        return gx, ggain, gshift

    return _record_op(out, (x, gain, shift), bw)


def global_avg_pool(x) -> Tensor:
    """Mean over the two spatial axes of an NCHW tensor, giving (N, C)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),)

    return _record_op(out, (x,), bw)
