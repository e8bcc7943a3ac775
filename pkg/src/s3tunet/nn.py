"""Parameter containers and the standard layers the blocks are built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``min_value`` is a floor the optimiser enforces after every update.
    """

    def __init__(self, data, min_value: float | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.min_value = min_value


class Module:
    """Base class: attributes that are Parameters, Modules or lists of Modules
    are discovered in definition order to build hierarchical names."""

    def __init__(self):
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self.buffers.items():
            yield prefix + name, buf
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != targets[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {targets[name].shape}")
        for name, arr in state.items():
            targets[name][...] = arr


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, *, pad=None, dilation=1, groups=1, bias=True):
        super().__init__()
        fan_in = (in_ch // groups) * kernel * kernel
        self.w = Parameter(kaiming_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in))
        self.b = Parameter(np.zeros(out_ch)) if bias else None
        self.pad = dilation * (kernel - 1) // 2 if pad is None else pad
        self.dilation = dilation
        self.groups = groups

    def forward(self, x):
        return ops.conv2d(x, self.w, self.b, pad=self.pad, dilation=self.dilation,
                          groups=self.groups)


class ConvTranspose2d(Module):
    """2x2 stride-2 up-sampling convolution."""

    def __init__(self, in_ch, out_ch, rng, kernel=2):
        super().__init__()
        self.w = Parameter(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), in_ch))
        self.b = Parameter(np.zeros(out_ch))
        self.stride = kernel

    def forward(self, x):
        return ops.conv_transpose2d(x, self.w, self.b, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.buffers["running_mean"],
                               self.buffers["running_var"], self.training,
                               momentum=self.momentum, eps=self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True):
        super().__init__()
        self.w = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.b = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, features, eps=1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.eps = eps

    def forward(self, x):
        return ops.layernorm(x, self.gain, self.bias, eps=self.eps)
