"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` walks that record in reverse topological order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float64 array that can carry gradient state.

    Parameters
    ----------
    data : array-like
        Values; copied into a C-contiguous float64 array.
    requires_grad : bool, default=False
        Whether :func:`backward` should compute a gradient for this tensor.
    name : str, optional
        Label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operator sugar; implementations live in gaittake.ops.
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

        return ops.neg(self)

    def __pow__(self, p):
        from . import ops

        return ops.pow(self, p)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.reduce(self, axis, "mean", keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients are overwritten, not accumulated. Tensors listed in ``leaves``
    that the loss does not reach receive an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# Serialization: u64 rank, u64 extents, then float64 values, all little-endian.

def write_tensor(fh: BinaryIO, value) -> int:
    arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
    header = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    fh.write(header)
    fh.write(arr.tobytes(order="C"))
    return len(header) + arr.nbytes


def read_tensor(fh: BinaryIO) -> np.ndarray:
    raw = fh.read(8)
    if len(raw) != 8:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack("<Q", raw)
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise ValueError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ValueError(f"truncated tensor body: expected {8 * count} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def tensor_to_bytes(value) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor(buf, value)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    import io

    buf = io.BytesIO(raw)
    arr = read_tensor(buf)
    if buf.read(1):
        raise ValueError("trailing bytes after tensor")
    return arr
