"""Parameter-holding layers on top of the tensor primitives."""

from collections import OrderedDict
from typing import Dict

import numpy as np

from cdbuffer.tensor import Tensor, nn


class Conv2d:
    """Bias-free convolution with He-normal initialization."""

    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel: int, stride: int = 1, rng: np.random.Generator = None):
        self.name = name
        self.stride = stride
        self.padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel, kernel))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (out_channels, in_channels, kernel, kernel))
        self.weight = Tensor(w, name=f'{name}.weight')

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv2d(x, self.weight, self.stride, self.padding)

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict([(self.weight.name, self.weight)])


class BatchNorm2d:
    """Batch normalization with affine parameters and running statistics."""

    def __init__(self, name: str, channels: int, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), name=f'{name}.gamma')
        self.beta = Tensor(np.zeros(channels), name=f'{name}.beta')
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        out = nn.batch_norm(x, self.gamma, self.beta, self.eps, training,
                            self.running_mean, self.running_var)
        if training:
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * out.batch_mean.data
            self.running_var = (1 - m) * self.running_var + m * out.batch_var.data
        return out.y

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict([(self.gamma.name, self.gamma),
                            (self.beta.name, self.beta)])

    def buffers(self) -> Dict[str, np.ndarray]:
        return OrderedDict([(f'{self.name}.running_mean', self.running_mean),
                            (f'{self.name}.running_var', self.running_var)])

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        setattr(self, key, np.array(value, dtype=np.float64))


class Linear:
    """Fully connected classifier head."""

    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator = None):
        self.name = name
        bound = 1.0 / np.sqrt(in_features)
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.uniform(-bound, bound, (out_features, in_features))
        self.weight = Tensor(w, name=f'{name}.weight')
        self.bias = Tensor(np.zeros(out_features), name=f'{name}.bias')

    def __call__(self, x: Tensor) -> Tensor:
        return nn.linear(x, self.weight, self.bias)

    def parameters(self) -> Dict[str, Tensor]:
        return OrderedDict([(self.weight.name, self.weight),
                            (self.bias.name, self.bias)])
