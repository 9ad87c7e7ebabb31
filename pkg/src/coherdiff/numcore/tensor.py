"""Dense tensor carrier and the reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array. Operations only record themselves
when a :class:`GradTape` is active and at least one operand has
``requires_grad`` set, so inference runs without any bookkeeping.
"""
from __future__ import annotations

import contextlib

import numpy as np

_DEFAULT_DTYPE = [np.float32]
_TAPES: list["GradTape"] = []


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for freshly created tensors.

    >>> with precision(np.float64):
    ...     Tensor([1.0]).dtype
    dtype('float64')
    """
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    """Row-major dense array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.name = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar; implementations live in ops ---------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, exponent):
        return _ops().power(self, exponent)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _ops().transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)


def _ops():
    from coherdiff.numcore import ops

    return ops


class GradTape:
    """Ordered record of differentiable operations plus a parameter registry.

    Usage::

        with GradTape() as tape:
            tape.watch(params)
            loss = f()
        grads = tape.gradient(loss)

    ``gradient`` returns one array per registered parameter; parameters
    the forward pass never touched receive exact zeros.
    """

    def __init__(self):
        self.records = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, params, name=None):
        if isinstance(params, Tensor):
            params = {name or params.name or f"param{len(self.params)}": params}
        for key, tensor in params.items():
            tensor.requires_grad = True
            self.params[key] = tensor
        return self

    def record(self, out, parents, backward):
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor, seed=None):
        """Propagate from ``loss``; returns a map ``id(tensor) -> grad``."""
        if seed is None:
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads

    def gradient(self, loss: Tensor, params=None):
        """Gradients of a scalar ``loss`` for every registered parameter."""
        params = self.params if params is None else params
        grads = self.backward(loss)
        result = {}
        for key, tensor in params.items():
            g = grads.get(id(tensor))
            result[key] = np.zeros_like(tensor.data) if g is None else np.asarray(g).reshape(tensor.shape)
        return result


def tracking():
    return bool(_TAPES)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_result(data, parents, backward) -> Tensor:
    """Wrap an op output and record it on the active tape if needed."""
    out = Tensor._wrap(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].record(out, parents, backward)
    return out
