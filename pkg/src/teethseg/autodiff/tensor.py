"""Dense float64 tensors and the reverse-mode tape that records operations on them."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

# op names whose backward rule is sign-flipped; only used by the gradient audit canary
_FAULTY_OPS: set[str] = set()


@contextlib.contextmanager
def inject_fault(op_name: str) -> Iterator[None]:
    """Negate the backward rule of ``op_name`` inside the block."""
    _FAULTY_OPS.add(op_name)
    try:
        yield
    finally:
        _FAULTY_OPS.discard(op_name)


class Tensor:
    """An immutable N-d array of 64-bit reals, optionally tracked on a :class:`Tape`."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node: int | None = None, tape: Tape | None = None, *, _owned: bool = False):
        if _owned:
            arr = np.ascontiguousarray(data, dtype=np.float64)
        else:
            arr = np.array(data, dtype=np.float64, copy=True, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.tape = tape

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
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Arithmetic sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(frozen=True)
class Record:
    op: str
    out: int
    inputs: tuple[int | None, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of primitive applications.

    Node ids are issued in creation order, so every record's inputs precede it.
    A tape supports a single :meth:`backward`; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.leaves: dict[int, tuple[int, ...]] = {}
        self._next = 0
        self._consumed = False

    def _new_node(self) -> int:
        node = self._next
        self._next += 1
        return node

    def watch(self, value) -> Tensor:
        """Return a tracked leaf holding ``value``."""
        data = value.data if isinstance(value, Tensor) else value
        node = self._new_node()
        t = Tensor(data, node=node, tape=self)
        self.leaves[node] = t.shape
        return t

    def record(self, op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        if op in _FAULTY_OPS:
            inner = backward

            def backward(g, inner=inner):
                return [None if d is None else -d for d in inner(g)]

        node = self._new_node()
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.records.append(Record(op, node, ids, backward))
        return Tensor(out_data, node=node, tape=self, _owned=True)

    def reset(self) -> None:
        self.records.clear()
        self.leaves.clear()
        self._next = 0
        self._consumed = False

    def backward(self, loss: Tensor) -> Gradients:
        if loss.node is None or loss.tape is not self:
            raise ValueError("backward through an untracked tensor: loss is not recorded on this tape")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("backward() already called on this tape; call reset() first")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for node, d in zip(rec.inputs, rec.backward(g)):
                if node is None or d is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + d
                else:
                    grads[node] = d
        out = {}
        for node, shape in self.leaves.items():
            g = grads.get(node)
            out[node] = np.zeros(shape) if g is None else np.asarray(g, dtype=np.float64).reshape(shape)
        return Gradients(out)


class Gradients:
    """Gradients of a scalar with respect to every watched leaf."""

    def __init__(self, by_node: dict[int, np.ndarray]):
        self._by_node = by_node

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node not in self._by_node:
            raise KeyError(f"{t!r} is not a watched leaf of this tape")
        return self._by_node[t.node]

    def __len__(self) -> int:
        return len(self._by_node)


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording it on the inputs' tape if any input is tracked."""
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None and t.node is not None}
    if not tapes:
        return Tensor(out_data, _owned=True)
    if len(tapes) > 1:
        raise ValueError(f"{op}: inputs are tracked on different tapes")
    (tape,) = tapes.values()
    return tape.record(op, out_data, inputs, backward)
