"""Dense float64 tensors with an explicit operation tape for reverse-mode autodiff.

The engine is define-by-run: every differentiable operation in :mod:`ssdnet.ops`
executes immediately on numpy arrays and, when handed a :class:`Tape`, appends a
backward rule. ``backward(tape, loss)`` replays the rules in exact reverse order,
accumulating gradients into each tensor's ``grad`` array.
"""

from __future__ import annotations

import threading

import numpy as np


class Tensor:
    """A dense rank-N array of float64 values with optional gradient storage.

    ``data`` is always a contiguous float64 ndarray. ``grad`` is lazily
    allocated (same shape) the first time a backward rule touches the tensor.
    ``requires_grad`` marks leaves whose gradients matter; backward rules may
    skip work for inputs that do not require gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        d = np.asarray(data, dtype=np.float64)
        if not d.flags["C_CONTIGUOUS"]:
            d = np.ascontiguousarray(d)
        self.data = d
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{what} contains NaN/Inf values")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class TapeConsumedError(RuntimeError):
    """Raised when backward() is called twice over the same tape."""


class _Op:
    """One recorded operation: input/output handles plus its backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations.

    Operations are appended in execution order, so the list is topologically
    sorted by construction: every op's inputs were produced before it ran.
    The backward pass visits entries in exact reverse order.
    """

    def __init__(self):
        self._ops: list[_Op] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        if any(t.requires_grad for t in inputs):
            output.requires_grad = True
        self._ops.append(_Op(tuple(inputs), output, backward_fn))


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every tensor reached from ``loss``.

    ``loss`` must be a scalar produced as the tape's final output. Gradients
    accumulate across calls on *different* tapes; callers are responsible for
    zeroing parameter gradients between optimization steps. A tape can be
    consumed only once.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise TapeConsumedError("tape has already been consumed by backward()")
    if not tape._ops or tape._ops[-1].output is not loss:
        raise ValueError("loss is not the final output recorded on this tape")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape._ops):
        g = op.output.grad
        if g is None:
            continue
        op.backward_fn(g)


class _Arena(threading.local):
    """Per-thread pool of scratch buffers, keyed by shape.

    Fresh multi-megabyte allocations dominate the cost of im2col at full
    resolution (page faulting); reusing buffers across training steps removes
    that. Buffers handed out by ``take`` are owned by the caller until
    ``release``d; released buffers may contain garbage and are fully
    overwritten by their next user.
    """

    MAX_PER_SHAPE = 8

    def __init__(self):
        self._free: dict[tuple[int, ...], list[np.ndarray]] = {}

    def take(self, shape: tuple[int, ...]) -> np.ndarray:
        stack = self._free.get(shape)
        if stack:
            return stack.pop()
        return np.empty(shape, dtype=np.float64)

    def take_zeroed(self, shape: tuple[int, ...]) -> np.ndarray:
        buf = self.take(shape)
        buf.fill(0.0)
        return buf

    def release(self, buf: np.ndarray) -> None:
        stack = self._free.setdefault(buf.shape, [])
        if len(stack) < self.MAX_PER_SHAPE:
            stack.append(buf)


arena = _Arena()
