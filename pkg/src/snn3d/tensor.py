"""Dense tensors with a per-thread recording tape for reverse-mode differentiation.

Every differentiable operation in :mod:`snn3d.ops` records a backward rule on the
tape that is active for the calling thread.  ``backward(loss)`` replays the tape
in reverse, writes ``.grad`` on every leaf that requires a gradient and then
discards the tape, so graphs never outlive a single forward/backward pass.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _local():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
        _state.dtype = np.dtype(np.float32)
    return _state


def default_dtype() -> np.dtype:
    return _local().dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors.

    ``precision(np.float64)`` is the 64-bit mode used by gradient checks.
    """
    st = _local()
    old = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = old


@contextlib.contextmanager
def no_grad():
    st = _local()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def grad_enabled() -> bool:
    return _local().grad_enabled


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    ``data`` is a numpy array owned by the tensor; operations never mutate it
    in place.  ``node`` is the index of the producing record on the active tape
    (``None`` for leaves and for tensors created outside recording).
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal constructor: takes ownership of arr without copying
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; the implementations live in snn3d.ops
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from . import ops

        return ops.add_scalar(ops.mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            if other.size == 1 and self.size != 1:
                return ops.scale(self, other)
            if self.size == 1 and other.size != 1:
                return ops.scale(other, self)
            return ops.mul(self, other)
        return ops.mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.div_scalar(self, other)
        return ops.mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops

        return ops.mul_scalar(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=default_dtype()), requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=default_dtype()), requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor._wrap(np.zeros_like(x.data))


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered list of recorded operations.

    Records are appended as operations execute, so every record's inputs were
    produced by earlier records (or are leaves): the list is already in
    topological order and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        output.node = len(self.records)
        self.records.append(_Record(tuple(inputs), output, backward))

    def clear(self) -> None:
        for rec in self.records:
            rec.output.node = None
        self.records = []

    def backward(self, loss: Tensor, retain: bool = False) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(.) to all leaves; returns ``{id(leaf): grad}``.

        Leaves that require a gradient get it accumulated into ``.grad``.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss.node is None:
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    if inp.node is None:
                        leaves[key] = inp
        out = {}
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(leaf.dtype, copy=False).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[key] = leaf.grad
        if not retain:
            self.clear()
        return out


def current_tape() -> Tape:
    return _local().tape


@contextlib.contextmanager
def fresh_tape():
    """Run a block against a private tape (restored afterwards)."""
    st = _local()
    old = st.tape
    st.tape = Tape()
    try:
        yield st.tape
    finally:
        st.tape.clear()
        st.tape = old


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` and record ``backward`` if any input needs a gradient."""
    st = _local()
    needs = st.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    if needs:
        st.tape.record(inputs, out, backward)
    return out


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Backpropagate from a scalar ``loss`` over the current thread's tape.

    If ``inputs`` is given, their gradients are returned in order (zeros for
    inputs the loss does not depend on).
    """
    grads = current_tape().backward(loss)
    if inputs is None:
        return None
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]
