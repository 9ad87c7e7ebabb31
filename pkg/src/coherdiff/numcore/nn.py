"""Minimal parameter containers for building networks on the tape."""
import numpy as np

from coherdiff.numcore import ops
from coherdiff.numcore.tensor import Tensor, default_dtype


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype or default_dtype())


class Module:
    """Attribute-walking parameter registry.

    Any attribute holding a grad-tracked :class:`Tensor`, a sub-``Module`` or
    a list of sub-modules contributes to :meth:`parameters`, named by its
    dotted attribute path in definition order.
    """

    def parameters(self, prefix=""):
        found = {}
        for attr, value in vars(self).items():
            key = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                found[key] = value
            elif isinstance(value, Module):
                found.update(value.parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.update(item.parameters(f"{key}.{i}."))
        return found

    def state_dict(self):
        return {name: p.data for name, p in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, order="C")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """``x @ weight + bias`` on the last axis; weight is ``(fan_in, fan_out)``."""

    def __init__(self, fan_in, fan_out, rng, bias=True, scale=1.0):
        self.weight = parameter(rng.standard_normal((fan_in, fan_out)) * scale / np.sqrt(fan_in))
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, scale=1.0):
        fan_in = cin * kernel * kernel
        self.weight = parameter(rng.standard_normal((cout, cin, kernel, kernel)) * scale / np.sqrt(fan_in))
        self.bias = parameter(np.zeros(cout))

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, padding="same")


class GroupNorm(Module):
    def __init__(self, groups, channels):
        self.groups = groups
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def forward(self, x):
        return ops.group_norm(x, self.groups, self.weight, self.bias)
