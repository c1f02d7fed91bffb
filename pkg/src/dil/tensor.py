"""Dense tensors with reverse-mode autodiff on a thread-local tape.

Values are plain numpy arrays: float32 by default, float64 when extra
precision is wanted (gradient checking). Every differentiable operation
appends one node to the active tape in execution order, which is already
a topological order; ``backward`` walks the tape in reverse and
accumulates gradients into ``.grad`` buffers until ``zero_grad`` clears
them.

There is no broadcasting: binary elementwise ops require identical
shapes and matching dtypes. Shape alignment is always explicit.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled: bool = True


_STATE = _TapeState()


class _Node:
    """One recorded operation: output, inputs, and a backward rule.

    ``backward_fn`` maps the gradient w.r.t. the output to a tuple of
    gradients aligned with ``inputs`` (``None`` for inputs that need no
    gradient).
    """

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: "Tensor", inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float array, optionally participating in the tape.

    Images use the [batch, channels, height, width] layout. ``grad`` is
    populated by ``backward`` for every tensor with ``requires_grad``
    reachable from the loss, and accumulates across calls.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, _as_tensor(other))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, _as_tensor(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    raise TypeError(f"expected Tensor, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# Tape control


def is_grad_enabled() -> bool:
    return _STATE.enabled


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation path)."""
    prev = _STATE.enabled
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def tape_size() -> int:
    return len(_STATE.nodes)


def clear_tape() -> None:
    _STATE.nodes.clear()


def _record(out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    if _STATE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _STATE.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, free_tape: bool = True) -> None:
    """Backpropagate from a scalar loss through the recorded tape.

    Gradients accumulate into ``.grad`` across calls until ``zero_grad``.
    The tape is freed afterwards unless ``free_tape=False`` (needed only
    to backpropagate the same recorded graph twice).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    nodes = _STATE.nodes
    if not nodes:
        raise ValueError("backward on an empty tape: no operations were recorded")

    # Per-call accumulation buffers; .grad only receives the final sums so
    # repeated backward calls add up cleanly.
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(nodes):
        out_grad = flowing.get(id(node.output))
        if out_grad is None:
            continue  # not reachable from this loss
        in_grads = node.backward_fn(out_grad)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            prev = flowing.get(key)
            flowing[key] = g if prev is None else prev + g
            by_id[key] = t

    for key, g in flowing.items():
        t = by_id[key]
        if t.requires_grad:
            # g may be a read-only broadcast view; nothing ever writes into
            # grad buffers in place, so aliasing is safe.
            t.grad = g if t.grad is None else t.grad + g

    if free_tape:
        nodes.clear()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Primitive operations


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * a.data.dtype.type(s))
    return _record(out, (a,), lambda g: (g * a.data.dtype.type(s),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (y * (1.0 - y)),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scalar_mul": scalar_mul,
                "relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name; binary ops need same shapes."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a) if b is None else fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes, when present, must match exactly (stacked matmul, no
    broadcasting).
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul: leading dims differ {a.data.shape} vs {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims differ {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def _back(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record(out, (a, b), _back)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; backward slices the incoming gradient."""
    if not parts:
        raise ValueError("concat of zero tensors")
    ref = parts[0].data
    if not -ref.ndim <= axis < ref.ndim:
        raise ValueError(f"concat axis {axis} out of range for rank {ref.ndim}")
    axis = axis % ref.ndim
    for p in parts[1:]:
        if p.data.ndim != ref.ndim or any(
            i != axis and p.data.shape[i] != ref.shape[i] for i in range(ref.ndim)
        ):
            raise ValueError(
                f"concat: incompatible shapes {[tuple(q.data.shape) for q in parts]} on axis {axis}"
            )
        if p.data.dtype != ref.dtype:
            raise ValueError("concat: dtype mismatch")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def _back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(parts), _back)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def tsum(a: Tensor) -> Tensor:
    """Full reduction to a scalar tensor."""
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    shape, dt = a.data.shape, a.data.dtype
    return _record(out, (a,), lambda g: (np.full(shape, g, dtype=dt),))


def tmean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))
    shape, dt = a.data.shape, a.data.dtype
    n = a.data.size
    return _record(out, (a,), lambda g: (np.full(shape, g / n, dtype=dt),))
