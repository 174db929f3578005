"""Parameter containers around the functional ops."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import DimensionError, StateError
from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


class Module:
    """Base class; submodules, parameters and buffers are found by attribute scan."""

    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data.copy()
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, dtype=DEFAULT_DTYPE)
        return state

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(own) + list(buffers) if k not in state]
        if strict and missing:
            raise StateError(f"checkpoint lacks entries: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
                p.data = arr.astype(DEFAULT_DTYPE).copy()
        for name, buf in buffers.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != buf.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model {buf.shape}")
                buf[...] = arr


def kaiming(rng, shape, fan_in, slope=F.LEAKY_SLOPE):
    gain = np.sqrt(2.0 / (1.0 + slope ** 2))
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, rng, kernel=3, stride=1, padding=1):
        super().__init__()
        self.spec = F.LayerSpec.conv(in_channels, out_channels, kernel, stride, padding)
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(kaiming(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.spec.stride, self.spec.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=F.BN_MOMENTUM, eps=F.BN_EPS):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(channels, dtype=DEFAULT_DTYPE)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, scale=1.0):
        super().__init__()
        self.weight = Parameter(scale * kaiming(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x):
        return F.fully_connected(x, self.weight, self.bias)
