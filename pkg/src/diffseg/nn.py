"""Parameters, modules and the fixed layer menu built on the autodiff core.

Parameter names are dotted paths derived from the module tree
(``encoder.units.0.res.conv1.w``); the training, freezing and checkpoint
machinery all key on these names, so the tree layout is part of the
contract.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .rng import RngStream
from . import tensor as T
from .tensor import Tensor


class Parameter:
    """Named tensor with a trainable flag; frozen parameters never move."""

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        self.tensor = Tensor(data, requires_grad=trainable)
        self.trainable = trainable
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.data.shape

    def set_trainable(self, flag: bool):
        self.trainable = bool(flag)
        self.tensor.requires_grad = bool(flag)

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={self.shape}, trainable={self.trainable})"


class Module:
    """Container that tracks child parameters, buffers and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        for pool in ("_params", "_modules", "_buffers"):
            d = object.__getattribute__(self, pool)
            if name in d:
                return d[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name: str, arr: np.ndarray):
        self._buffers[name] = arr

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for k, p in self._params.items():
            path = f"{prefix}{k}"
            p.name = path
            out[path] = p
        for k, m in self._modules.items():
            out.update(m.named_parameters(f"{prefix}{k}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}{k}": v for k, v in self._buffers.items()}
        for k, m in self._modules.items():
            out.update(m.named_buffers(f"{prefix}{k}."))
        return out

    def set_buffer(self, path: str, arr: np.ndarray):
        head, _, rest = path.partition(".")
        if rest:
            self._modules[head].set_buffer(rest, arr)
        else:
            if head not in self._buffers:
                raise KeyError(f"no buffer named {path}")
            self._buffers[head] = arr

    def set_training(self, flag: bool):
        object.__setattr__(self, "training", bool(flag))
        for m in self._modules.values():
            m.set_training(flag)

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.tensor.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Sequence of submodules registered under their index."""

    def __init__(self, mods=()):
        super().__init__()
        self._order = []
        for m in mods:
            self.append(m)

    def append(self, m: Module):
        key = str(len(self._order))
        self._modules[key] = m
        self._order.append(m)

    def __len__(self):
        return len(self._order)

    def __iter__(self):
        return iter(self._order)

    def __getitem__(self, i):
        return self._order[i]


# -- layers -----------------------------------------------------------------


def fan_in_normal(rng: RngStream, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return rng.normal(shape, dtype=dtype) * np.asarray(1.0 / math.sqrt(fan_in), dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng: RngStream, stride=1, padding=None,
                 zero_init=False, bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.in_channels = cin
        self.out_channels = cout
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = fan_in_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        b = self.b.tensor if self.b is not None else None
        return T.conv2d(x, self.w.tensor, b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, cin, cout, rng: RngStream, zero_init=False, dtype=np.float32):
        super().__init__()
        if zero_init:
            w = np.zeros((cin, cout), dtype=dtype)
        else:
            w = fan_in_normal(rng, (cin, cout), cin, dtype)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w.tensor) + self.b.tensor


def resolve_norm_groups(channels: int, preferred: int = 8) -> int:
    """Largest group count <= preferred that divides the channel count."""
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels, groups=None, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.groups = resolve_norm_groups(channels) if groups is None else groups
        if channels % self.groups:
            raise ConfigError(f"group count {self.groups} does not divide {channels} channels")
        self.eps = eps
        self.g = Parameter(np.ones(channels, dtype=dtype))
        self.b = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.g.tensor, self.b.tensor, self.groups, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.g = Parameter(np.ones(channels, dtype=dtype))
        self.b = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.g.tensor, self.b.tensor,
            self._buffers["running_mean"], self._buffers["running_var"],
            training=self.training, momentum=self.momentum, eps=self.eps,
        )
