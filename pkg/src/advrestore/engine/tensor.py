"""Tensor type and the reverse-mode graph it records."""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Dtype used when a Tensor is built from python scalars or lists."""
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def debug_enabled() -> bool:
    return getattr(_local, "debug", False)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every forward output for NaN/Inf while active."""
    prev = debug_enabled()
    _local.debug = enabled
    try:
        yield
    finally:
        _local.debug = prev


class NonFiniteError(FloatingPointError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """n-dimensional float array that can participate in a differentiable graph.

    ``grad`` is a plain ndarray of the same shape, filled by :func:`backward`
    for leaves created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "id", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = "leaf"
        self.parents: tuple = ()
        self.backward_fn: Optional[BackwardFn] = None

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # --- operators (implemented in functional) ---------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __pow__(self, exponent: float):
        from . import functional as F
        return F.pow_scalar(self, exponent)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    def backward(self, accumulate: bool = False) -> "Graph":
        return backward(self, accumulate=accumulate)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    if dtype is None and isinstance(value, np.ndarray) and np.issubdtype(value.dtype, np.floating):
        dtype = value.dtype
    return Tensor(np.asarray(value, dtype=dtype or _DEFAULT_DTYPE))


def make_node(data: np.ndarray, parents: tuple, backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op's forward result, recording it in the graph when any parent is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_ids)
    out.op = op
    tracked = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out.parents = parents
        out.backward_fn = backward_fn
    else:
        out.parents = ()
        out.backward_fn = None
    if debug_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from op '{op}' (shape {data.shape})")
    return out


class Graph:
    """The recorded ops reachable from one output, in topological order.

    Node ids come from a global monotone counter, and an op's inputs always
    exist before the op runs, so sorting by id is a valid topological order.
    """

    def __init__(self, output: Tensor):
        self.output = output
        seen = {}
        stack = [output]
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(p for p in node.parents if p.requires_grad)
        ordered = sorted(seen.values(), key=lambda t: t.id)
        self.ops = [t for t in ordered if t.backward_fn is not None]
        self.leaves = [t for t in ordered if t.backward_fn is None and t.requires_grad]
        self.visits: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.ops)

    def run(self, grad: Optional[np.ndarray] = None, accumulate: bool = False) -> None:
        out = self.output
        seed = np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=out.dtype)
        grads: dict[int, np.ndarray] = {out.id: seed}
        leaf_grads: dict[int, np.ndarray] = {}
        if out.backward_fn is None:
            leaf_grads[out.id] = seed
        for node in reversed(self.ops):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            self.visits[node.id] = self.visits.get(node.id, 0) + 1
            pgrads = node.backward_fn(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                target = leaf_grads if parent.backward_fn is None else grads
                prev = target.get(parent.id)
                target[parent.id] = pg if prev is None else prev + pg
        for leaf in self.leaves:
            g = leaf_grads.get(leaf.id)
            if g is None:
                continue
            if accumulate and leaf.grad is not None:
                leaf.grad = leaf.grad + g
            else:
                leaf.grad = g

    def dump(self) -> str:
        """Text edge list: one ``#parent -> #child op`` line per recorded edge."""
        lines = []
        for leaf in self.leaves:
            lines.append(f"#{leaf.id} leaf {tuple(leaf.shape)}")
        for node in self.ops:
            ins = ", ".join(f"#{p.id}" for p in node.parents)
            lines.append(f"#{node.id} {node.op} {tuple(node.shape)} <- {ins}")
        return "\n".join(lines)


def backward(loss: Tensor, accumulate: bool = False) -> Graph:
    """Populate ``.grad`` on every tracked leaf reachable from scalar ``loss``.

    Leaf gradients are overwritten unless ``accumulate`` is set.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")
    graph = Graph(loss)
    graph.run(accumulate=accumulate)
    return graph


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
