"""Dense tensor type and the tape used for reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active record one node per op; :meth:`Tape.backward` then
walks the nodes in reverse recording order, which is a valid reverse
topological order because a node can only consume tensors that already exist.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """N-dimensional float array with optional gradient tracking.

    Floating inputs keep their dtype (float64 arrays stay float64, which is
    what the gradient-check path relies on); everything else is converted to
    float32.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another dtype (no gradient link)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # Operator sugar; the kernels live in volnet.ops.
    def __add__(self, other):
        from volnet import ops

        return ops.add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        from volnet import ops

        return ops.mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __sub__(self, other):
        from volnet import ops

        return ops.sub(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        from volnet import ops

        return ops.mul(self, Tensor(np.array(-1.0, dtype=self.dtype)))

    def __matmul__(self, other):
        from volnet import ops

        return ops.matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: tuple[int, ...]


_ACTIVE: list["Tape"] = []


def current_tape() -> "Tape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops run inside the ``with`` block are recorded
    when at least one input requires a gradient::

        with Tape() as tape:
            loss = f(x)
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        # Leaves are pinned so their ids stay valid for the life of the tape.
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def node_of(self, t: Tensor) -> Optional[int]:
        if not t.requires_grad:
            return None
        if t._tape is not self:
            t.node_id = len(self.nodes)
            t._tape = self
            self.nodes.append(Node("leaf", (), None, t.shape))
            self._leaves.append(t)
        return t.node_id

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward: BackwardFn) -> Tensor:
        ids = tuple(self.node_of(t) for t in inputs)
        if all(i is None for i in ids):
            return out
        out.requires_grad = True
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(op, ids, backward, out.shape))
        return out

    def backward(self, loss: Tensor) -> "GradMap":
        return backward(self, loss)


class GradMap(dict):
    """Mapping ``node_id -> gradient Tensor`` produced by :func:`backward`."""

    def __init__(self, tape: Tape):
        super().__init__()
        self.tape = tape

    def grad_of(self, t: Tensor) -> Optional[Tensor]:
        if t._tape is not self.tape or t.node_id is None:
            return None
        return self.get(t.node_id)


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Gradients of the scalar ``loss`` with respect to every recorded node."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones(loss.shape, dtype=loss.dtype)
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.backward is None:
            continue
        in_grads = node.backward(g)
        for src, gi in zip(node.inputs, in_grads):
            if src is None or gi is None:
                continue
            if gi.shape != tape.nodes[src].shape:
                raise ShapeError(
                    f"{node.op} backward produced gradient {gi.shape} for input of shape {tape.nodes[src].shape}"
                )
            grads[src] = gi if grads[src] is None else grads[src] + gi
    out = GradMap(tape)
    for nid, g in enumerate(grads):
        if g is not None:
            out[nid] = Tensor(g)
    return out
