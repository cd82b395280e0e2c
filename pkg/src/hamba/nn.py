"""Parameter-owning layers on top of the autodiff kernels.

Layers register their tensors into a shared :class:`ParamStore` under a
dot-separated prefix at construction time; ``forward`` reads them back from
the layer's attributes.  Initialization follows the usual fan-in uniform
scheme so randomly initialized models behave like their torch counterparts.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import ParamStore, Tensor, ops


class Module:
    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix
        self.training = True

    def _name(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def param(self, name: str, value: np.ndarray) -> Tensor:
        return self.store.add(self._name(name), value)

    def children(self):
        """Sub-modules held as attributes, directly or inside lists/tuples."""
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, store, prefix, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__(store, prefix)
        self.weight = self.param("weight", uniform_fan_in(rng, (d_in, d_out), d_in))
        self.bias = self.param("bias", uniform_fan_in(rng, (d_out,), d_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, store, prefix, dim: int, eps: float = 1e-5):
        super().__init__(store, prefix)
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    """Channels-last batch norm; statistics pool every axis except the last."""

    def __init__(self, store, prefix, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(store, prefix)
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))
        self.running_mean = store.add_buffer(self._name("running_mean"), np.zeros(dim))
        self.running_var = store.add_buffer(self._name("running_var"), np.ones(dim))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Conv2d(Module):
    def __init__(self, store, prefix, c_in: int, c_out: int, kernel: int, rng,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        super().__init__(store, prefix)
        fan_in = c_in * kernel * kernel
        self.weight = self.param("weight", uniform_fan_in(rng, (kernel, kernel, c_in, c_out), fan_in))
        self.bias = self.param("bias", uniform_fan_in(rng, (c_out,), fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv1d(Module):
    def __init__(self, store, prefix, channels: int, kernel: int, rng):
        super().__init__(store, prefix)
        self.weight = self.param("weight", uniform_fan_in(rng, (kernel, channels), kernel))

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv1d(x, self.weight)


class FeedForward(Module):
    """Linear -> GELU -> Linear with hidden width ``ratio * dim``."""

    def __init__(self, store, prefix, dim: int, rng, ratio: int = 4):
        super().__init__(store, prefix)
        self.fc1 = Linear(store, self._name("fc1"), dim, ratio * dim, rng)
        self.fc2 = Linear(store, self._name("fc2"), ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class MLP(Module):
    """Stack of Linear layers with ReLU between them (none after the last)."""

    def __init__(self, store, prefix, widths: list, rng, final_scale: Optional[float] = None):
        super().__init__(store, prefix)
        self.layers = [Linear(store, self._name(f"layers.{i}"), a, b, rng)
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        if final_scale is not None:
            last = self.layers[-1]
            last.weight.data *= final_scale
            last.bias.data *= final_scale

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x
