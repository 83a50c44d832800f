"""Parameter containers and the two convolution layers every transform is built from."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: any ``Tensor`` attribute is a parameter, any ``Module`` (or list of
    them) a child.  Attribute insertion order fixes the parameter order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def astype(self, dtype) -> Module:
        """Cast every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, zero: bool = False, gain: float = 1.0):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        self.weight = param(np.zeros(shape) if zero else kaiming_uniform(rng, shape, cin * k * k, gain))
        self.bias = param(np.zeros((1, cout, 1, 1)))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, k: int, rng: np.random.Generator, stride: int = 1):
        self.stride = stride
        self.padding = k // 2
        self.weight = param(kaiming_uniform(rng, (channels, 1, k, k), k * k))
        self.bias = param(np.zeros((1, channels, 1, 1)))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    out_channels = in_channels

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return T.depthwise_conv2d(x, self.weight, self.bias, self.stride, self.padding)
