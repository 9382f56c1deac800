"""Parameter-holding layers built on the tensor ops, with He-style init."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, parameter


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int = 1,
                 dilation: int = 1, padding: str = "same", bias: bool = True):
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        self.weight = parameter(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        dilation=self.dilation, padding=self.padding)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias

    def named_buffers(self, prefix: str):
        return ()


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.scale = parameter(np.ones(channels, dtype=np.float32))
        self.shift = parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batch_norm(x, self.scale, self.shift, self.running_mean,
                            self.running_var, train, self.momentum, self.eps)

    def named_params(self, prefix: str):
        yield f"{prefix}.scale", self.scale
        yield f"{prefix}.shift", self.shift

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(he_normal(rng, (d_in, d_out), d_in))
        self.bias = parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_params(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias

    def named_buffers(self, prefix: str):
        return ()


def collect_params(named_layers) -> dict[str, Tensor]:
    """Flatten (name, layer) pairs into an ordered name -> parameter dict."""
    out: dict[str, Tensor] = {}
    for name, layer in named_layers:
        for pname, p in layer.named_params(name):
            out[pname] = p
    return out


def collect_buffers(named_layers) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, layer in named_layers:
        for bname, b in layer.named_buffers(name):
            out[bname] = b
    return out
