"""Dense float tensors with an explicit reverse-mode autodiff tape.

The carrier type is a thin wrapper over a C-contiguous numpy array.  Tensors
are immutable values: operations always allocate fresh outputs, so sharing
across threads is safe.  Differentiation is organised around an explicit
:class:`Tape` that is created per training step; there is no global autodiff
state.  A tensor participates in differentiation only if it was produced by
``tape.watch`` or by an operation whose inputs participate.

Checked mode (on by default) screens every constructed tensor for NaN/Inf,
which catches numerical accidents at their source rather than three modules
downstream.  Benchmarks switch it off.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(ValueError):
    """Raised in checked mode when a tensor would contain NaN or Inf."""


_state = threading.local()


def _cfg():
    if not hasattr(_state, "checked"):
        _state.checked = True
        _state.dtype = np.float32
    return _state


def set_checked(enabled: bool) -> None:
    _cfg().checked = bool(enabled)


def checked_enabled() -> bool:
    return _cfg().checked


@contextlib.contextmanager
def unchecked():
    """Temporarily disable NaN/Inf screening (used by benchmarks)."""
    prev = checked_enabled()
    set_checked(False)
    try:
        yield
    finally:
        set_checked(prev)


def default_dtype() -> np.dtype:
    return np.dtype(_cfg().dtype)


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the dtype used when constructing tensors.

    Training runs in float32; gradient-check tests build their models under
    float64 so that finite differences measure implementation correctness
    rather than rounding noise.
    """
    cfg = _cfg()
    prev = cfg.dtype
    cfg.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        cfg.dtype = prev


def _validate(data: np.ndarray) -> None:
    if checked_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(
            f"tensor of shape {tuple(data.shape)} contains NaN or Inf"
        )


class Tensor:
    """A dense rank-N array of floats, optionally linked to a tape node."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        arr = np.ascontiguousarray(arr)
        _validate(arr)
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(*shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=default_dtype()))

    @staticmethod
    def full(shape, value) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=default_dtype()))

    # -- metadata ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

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
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        """The same values with no tape participation."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators (implementations live in ops.py) --------------------------

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("input_ids", "backward", "shape", "dtype")

    def __init__(self, input_ids, backward, shape, dtype):
        self.input_ids = input_ids
        self.backward = backward
        self.shape = shape
        self.dtype = dtype


class GradientMap:
    """Gradients produced by ``Tape.backward``, keyed by watched tensor."""

    def __init__(self, tape: "Tape", slots: list):
        self._tape = tape
        self._slots = slots

    def get(self, t: Tensor) -> Optional[np.ndarray]:
        if t.tape is not self._tape or t.node_id is None:
            return None
        return self._slots[t.node_id]

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        if g is None:
            # Unreached parameters have a well-defined zero gradient.
            g = np.zeros(t.shape, dtype=t.dtype)
        return g


class Tape:
    """An ordered record of primitive operations for one backward pass.

    Nodes are appended in execution order, so the record is topologically
    sorted by construction; ``backward`` walks it once in reverse with a
    deterministic accumulation order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, t: Tensor) -> Tensor:
        """Register a leaf (parameter) tensor and return its taped alias."""
        t = as_tensor(t)
        node_id = len(self.nodes)
        self.nodes.append(_Node((), None, t.shape, t.dtype))
        return Tensor(t.data, tape=self, node_id=node_id)

    def emit(self, out_data: np.ndarray, inputs: Sequence[Tensor],
             backward: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]) -> Tensor:
        """Record one primitive producing ``out_data`` from taped ``inputs``.

        ``backward`` maps the output gradient to one gradient (or None) per
        input, in order.  Only inputs that live on this tape receive them.
        """
        node_id = len(self.nodes)
        ids = tuple(t.node_id if (t.tape is self and t.node_id is not None) else -1
                    for t in inputs)
        self.nodes.append(_Node(ids, backward, out_data.shape, out_data.dtype))
        return Tensor(out_data, tape=self, node_id=node_id)

    def backward(self, loss: Tensor) -> GradientMap:
        """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

        Gradients of interior nodes are dropped as soon as they have been
        propagated; the returned map answers queries for watched leaves,
        which is the documented contract.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss does not belong to this tape")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        slots: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        slots[loss.node_id] = np.ones(loss.shape, dtype=loss.dtype)
        for node_id in range(loss.node_id, -1, -1):
            grad = slots[node_id]
            node = self.nodes[node_id]
            if grad is None or node.backward is None:
                continue
            input_grads = node.backward(grad)
            slots[node_id] = None
            for in_id, g in zip(node.input_ids, input_grads):
                if in_id < 0 or g is None:
                    continue
                if slots[in_id] is None:
                    slots[in_id] = np.array(g, copy=True)
                else:
                    slots[in_id] = slots[in_id] + g
        return GradientMap(self, slots)

    def release(self) -> None:
        """Drop all recorded closures and the arrays they capture.

        Taped tensors reference the tape and the node closures reference the
        tensors, so a finished step's graph forms a cycle that otherwise
        waits for a full garbage collection.  Training calls this once the
        gradients have been read; the tape must not be used afterwards.
        """
        self.nodes.clear()


def active_tape(tensors: Iterable) -> Optional[Tape]:
    """The single tape shared by any taped operands, or None.

    Mixing tensors from two different live tapes is a programming error.
    """
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands belong to two different tapes")
    return tape
