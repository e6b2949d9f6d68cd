"""Dense n-d arrays with a reverse-mode gradient tape.

Every differentiable operation in this package funnels through
:func:`record`: it computes its result eagerly with numpy, then (when grad
mode is on and an input requires grad) appends a tape node holding a closure
that maps the output gradient to input gradients.  The tape is a flat list in
creation order, which is already a topological order, so :func:`backward`
walks it once in reverse.

Numeric conventions:

* dtype is float64 by default (``set_default_dtype`` switches the build to
  float32 for speed runs; all stated tolerances assume float64);
* reductions delegate to numpy's pairwise summation, so results are
  bit-deterministic for a given build mode;
* every public operation checks its output for NaN/Inf and raises
  :class:`NumericError` instead of propagating silently.

The tape is process-global and confined to one logical training thread.
Tensors themselves are safe to share for concurrent reads.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when an operation produces or receives NaN/Inf values."""


class FormatError(ValueError):
    """Raised on malformed binary container data (bad magic, truncation)."""


_DTYPE = np.float64


def set_default_dtype(name: str) -> None:
    """Select the build's numeric width: "float64" (tests) or "float32"."""
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"unsupported dtype {name!r}")
    _DTYPE = np.float64 if name == "float64" else np.float32


def default_dtype():
    return _DTYPE


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


# ---------------------------------------------------------------------------
# tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """A dense array plus an optional gradient slot.

    ``data`` is always a C-contiguous numpy array of the build dtype.
    ``grad``, once populated by :func:`backward`, has the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C", not ascontiguousarray: the latter turns
        # rank-0 arrays into shape (1,)
        arr = np.asarray(data, dtype=_DTYPE, order="C")
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; the functional API below is primary.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class TapeNode:
    """One recorded operation: op id, inputs, output, and a pullback closure.

    The closure receives dLoss/dOutput and accumulates dLoss/dInput into each
    input tensor's ``grad`` slot.  Saved activations live in the closure.
    """

    __slots__ = ("op", "inputs", "out", "fn")

    def __init__(self, op: str, inputs, out: Tensor, fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.fn = fn


_TAPE: list[TapeNode] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording a tape node if grads are live.

    ``fn`` is only retained (and the output only marked ``requires_grad``)
    when grad mode is enabled and at least one input requires grad.
    """
    _check_finite(out_data, op)
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=_DTYPE, order="C")
    out.requires_grad = needs
    out.grad = None
    if needs:
        _TAPE.append(TapeNode(op, tuple(inputs), out, fn))
    return out


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating on first touch, never in place)."""
    if t.grad is None:
        t.grad = np.asarray(g, dtype=_DTYPE).copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Walks the tape in reverse creation order (a valid reverse-topological
    order by construction) and consumes it: a second backward without a new
    forward raises.  Gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not _TAPE:
        raise RuntimeError("backward called with an empty tape "
                           "(no recorded forward, or tape already consumed)")
    try:
        accumulate(loss, np.ones_like(loss.data))
        for node in reversed(_TAPE):
            g = node.out.grad
            if g is None:
                continue  # branch not upstream of the loss
            node.fn(g)
    finally:
        _TAPE.clear()


# ---------------------------------------------------------------------------
# creation
# ---------------------------------------------------------------------------

def _validate_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    for s in shape:
        if s < 1:
            raise ShapeError(f"extents must be >= 1, got shape {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_validate_shape(shape), dtype=_DTYPE), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_validate_shape(shape), value, dtype=_DTYPE), requires_grad)


def uniform(shape, low: float, high: float, rng: np.random.Generator,
            requires_grad: bool = False) -> Tensor:
    return Tensor(rng.uniform(low, high, _validate_shape(shape)), requires_grad)


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator,
                   requires_grad: bool = False) -> Tensor:
    """Scaled normal fill, std = sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ShapeError("fan_in must be >= 1")
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, _validate_shape(shape)), requires_grad)


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(value, dtype=_DTYPE), requires_grad)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down the axes numpy broadcast up from ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def fn(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g, b.shape))

    return record("add", (a, b), a.data + b.data, fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")

    def fn(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g, b.shape))

    return record("sub", (a, b), a.data - b.data, fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * bd, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * ad, b.shape))

    return record("mul", (a, b), ad * bd, fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def fn(g):
        if a.requires_grad:
            accumulate(a, g * s)

    return record("scale", (a,), a.data * s, fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def fn(g):
        if a.requires_grad:
            accumulate(a, g * mask)

    return record("relu", (a,), np.where(mask, a.data, 0.0), fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def fn(g):
        if a.requires_grad:
            accumulate(a, g * out * (1.0 - out))

    return record("sigmoid", (a,), out, fn)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def _normalize_axes(a: Tensor, axes, op: str):
    if axes is None:
        return tuple(range(a.data.ndim))
    axes = tuple(int(ax) for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"{op}: duplicate axes {axes}")
    for ax in axes:
        if not 0 <= ax < a.data.ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for shape {a.shape}")
    return axes


def _identity(a: Tensor, op: str) -> Tensor:
    def fn(g):
        if a.requires_grad:
            accumulate(a, g)

    return record(op, (a,), a.data.copy(), fn)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(a, axes, "sum")
    if not axes:
        return _identity(a, "sum")
    shape = a.shape

    def fn(g):
        if a.requires_grad:
            accumulate(a, np.broadcast_to(np.expand_dims(g, axes), shape))

    return record("sum", (a,), a.data.sum(axis=axes), fn)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(a, axes, "mean")
    if not axes:
        return _identity(a, "mean")
    shape = a.shape
    n = 1
    for ax in axes:
        n *= shape[ax]

    def fn(g):
        if a.requires_grad:
            accumulate(a, np.broadcast_to(np.expand_dims(g, axes), shape) / n)

    return record("mean", (a,), a.data.mean(axis=axes), fn)


def reduce_max(a: Tensor, axes=None) -> Tensor:
    """Max over ``axes``; ties split the subgradient equally."""
    axes = _normalize_axes(a, axes, "max")
    if not axes:
        return _identity(a, "max")
    out = a.data.max(axis=axes)
    expanded = np.expand_dims(out, axes)
    mask = (a.data == expanded)
    ties = mask.sum(axis=axes)

    def fn(g):
        if a.requires_grad:
            accumulate(a, mask * np.expand_dims(g / ties, axes))

    return record("max", (a,), out, fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def fn(g):
        if a.requires_grad:
            accumulate(a, g.reshape(old))

    return record("reshape", (a,), a.data.reshape(shape), fn)


# ---------------------------------------------------------------------------
# serialization: TSR1 record
# ---------------------------------------------------------------------------
# little-endian: magic "TSR1" | u8 rank | u32 extents | f32 payload row-major

_TSR_MAGIC = b"TSR1"


def write_tensor_record(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise FormatError("tensor rank exceeds TSR1 limit of 255")
    fh.write(_TSR_MAGIC)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes(order="C"))


def read_tensor_record(fh) -> np.ndarray:
    offset = fh.tell()
    magic = fh.read(4)
    if magic != _TSR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at offset {offset}")
    rank_b = fh.read(1)
    if len(rank_b) != 1:
        raise FormatError(f"truncated tensor header at offset {fh.tell()}")
    rank = rank_b[0]
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError(f"truncated tensor extents at offset {fh.tell()}")
    shape = struct.unpack(f"<{rank}I", raw)
    count = 1
    for s in shape:
        if s < 1 or s > 2**31:
            raise FormatError(f"invalid extent {s} at offset {offset}")
        count *= s
        if count > 2**33:
            raise FormatError(f"extent overflow in tensor at offset {offset}")
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"truncated tensor payload at offset {fh.tell()}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(_DTYPE)


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        write_tensor_record(fh, t.data)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_tensor_record(fh))
