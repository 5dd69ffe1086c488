"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass. Applying one
to tensors that require gradients appends a node to the graph; nodes carry a
monotonically increasing sequence number, so sorting the nodes reachable
from a loss by that number in descending order gives a valid reverse
topological order (inputs always precede the nodes that consume them).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np

from .errors import UsageError

_DTYPES = {"single": np.float32, "double": np.float64}
_precision = "single"
_seq = itertools.count()
_local = threading.local()


def get_precision() -> str:
    return _precision


def set_precision(name: str) -> None:
    """Switch the run-wide element precision ("single" or "double")."""
    global _precision
    if name not in _DTYPES:
        raise UsageError(f"unknown precision {name!r}; expected 'single' or 'double'")
    _precision = name


def default_dtype():
    return _DTYPES[_precision]


@contextmanager
def precision(name: str):
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate operations without recording graph nodes."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Node:
    __slots__ = ("fn", "inputs", "seq")

    def __init__(self, fn: "Function", inputs: Sequence["Tensor"]):
        self.fn = fn
        self.inputs = tuple(inputs)
        self.seq = next(_seq)


class Tensor:
    """An n-dimensional array with optional gradient and graph linkage.

    ``data`` is stored in the run-wide precision unless ``dtype`` is given.
    Only leaf tensors (created directly, not by an operation) hold ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # operator sugar; implementations live in fusenet.ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.add(self, ops.scale(other, -1.0))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays (saving whatever context
    backward needs on ``self``) and ``backward``, which maps the gradient of
    the output to a tuple with one gradient (or ``None``) per tensor input.
    ``needs_input_grad`` lets backward skip work for inputs that are not
    differentiated.
    """

    needs_input_grad: tuple = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls()
        fn.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors), **kwargs), dtype=tensors[0].data.dtype)
        if grad_enabled() and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out.node = Node(fn, tensors)
        return out


def _collect(root: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [root.node]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(t.node for t in node.inputs if t.requires_grad)
    nodes.sort(key=lambda n: n.seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Gradients add onto whatever ``grad`` already holds; callers zero them
    between optimizer steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        _accumulate(loss, seed)
        return
    pending = {id(loss.node): seed}
    for node in _collect(loss):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        for inp, g in zip(node.inputs, node.fn.backward(grad)):
            if g is None or not inp.requires_grad:
                continue
            if inp.node is None:
                _accumulate(inp, g)
            else:
                key = id(inp.node)
                pending[key] = pending[key] + g if key in pending else g


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)
