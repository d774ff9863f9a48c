"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that keeps a
reference to its inputs and a closure mapping the output gradient to input
gradients. :meth:`Tensor.backward` walks that graph once in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .errors import NonFiniteError, UsageError

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float64
_ids = itertools.count()
_KINKS: Optional[list] = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the branch taken by every non-smooth op (relu, abs, max pool).

    Yields the list the ops append to. Gradient checks compare these lists to
    tell whether a finite-difference stencil straddled a kink.
    """
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def note_kink(branch: np.ndarray) -> None:
    if _KINKS is not None:
        _KINKS.append(np.array(branch, copy=True))


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array with an optional gradient.

    ``_parents`` and ``_backward`` form the computation record: the backward
    closure receives the output gradient and returns one gradient (or None)
    per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Sequence["Tensor"] = (), _backward: Optional[Callable] = None,
                 _op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self.id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise NonFiniteError(f"{what} contains NaN or Inf")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction -------------------------------------------------
    @staticmethod
    def make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Wrap an op result, recording the graph only when a parent needs grad."""
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if needs:
            return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
        return Tensor(data, _op=op)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``grad`` on every reachable leaf that requires it.

        Gradients accumulate into existing ``grad`` arrays on leaves, so
        callers zero them between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))

        grads = {self.id: np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.make(self.data + other.data, (self, other),
                           lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor.make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.make(self.data - other.data, (self, other),
                           lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)), "sub")

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.make(a * b, (self, other),
                           lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor.make(a / b, (self, other),
                           lambda g: (_unbroadcast(g / b, a.shape),
                                      _unbroadcast(-g * a / (b * b), b.shape)), "div")

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise UsageError("tensor exponents are not supported")
        a = self.data
        return Tensor.make(a ** exponent, (self,),
                           lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def back(g):
            if a.ndim == 1 and b.ndim == 1:
                return g * b, g * a
            if b.ndim == 1:
                return np.outer(g, b), a.T @ g
            if a.ndim == 1:
                return b @ g, np.outer(a, g)
            return g @ b.T, a.T @ g

        return Tensor.make(a @ b, (self, other), back, "matmul")

    def square(self):
        a = self.data
        return Tensor.make(a * a, (self,), lambda g: (2.0 * a * g,), "square")

    def exp(self):
        out = np.exp(self.data)
        return Tensor.make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return Tensor.make(np.log(a), (self,), lambda g: (g / a,), "log")

    def abs(self):
        a = self.data
        note_kink(np.sign(a))
        return Tensor.make(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    # -- reductions and shape ops --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.make(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor.make(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),), "reshape")

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor.make(np.transpose(self.data, axes), (self,),
                           lambda g: (np.transpose(g, inv),), "transpose")

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        shape = self.shape
        dtype = self.dtype

        def back(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, index, g)
            return (out,)

        return Tensor.make(self.data[index], (self,), back, "getitem")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _DEFAULT_DTYPE))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    dtype = dtype if dtype is not None else _DEFAULT_DTYPE
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor.make(np.concatenate([t.data for t in tensors], axis=axis),
                       tuple(tensors), back, "concat")
