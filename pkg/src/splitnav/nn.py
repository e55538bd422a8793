"""Layers built on the tensor engine: conv, group norm, linear, MLP.

Modules are plain classes exposing ``__call__`` and ``named_parameters()``.
Parameter names are stable, dot-separated paths used by the checkpoint
format, so renaming a field is a file-format change.
"""
from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigurationError
from . import tensor as T
from .tensor import Tensor


def lecun_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, *, rng: np.random.Generator):
        if in_channels < 1 or out_channels < 1 or kernel < 1:
            raise ConfigurationError("conv dimensions must be positive")
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(lecun_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


def default_groups(channels: int) -> int:
    return min(8, channels)


class GroupNorm:
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5):
        self.groups = default_groups(channels) if groups is None else groups
        if channels % self.groups != 0:
            raise ConfigurationError(f"channels {channels} not divisible by groups {self.groups}")
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta, self.eps)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta


class Linear:
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator,
                 weight_bound: float | None = None):
        if in_features < 1 or out_features < 1:
            raise ConfigurationError("linear dimensions must be positive")
        bound = np.sqrt(1.0 / in_features) if weight_bound is None else weight_bound
        self.weight = Tensor(uniform_init(rng, (out_features, in_features), bound),
                             requires_grad=True)
        self.bias = Tensor(uniform_init(rng, (out_features,), bound), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class MLP:
    """Fully connected stack with ReLU hidden layers.

    ``out_activation`` is "tanh", "sigmoid", or None for a raw linear head.
    ``final_bound`` optionally shrinks the output layer's init range (the
    usual trick for actor/critic heads).
    """

    def __init__(self, in_features: int, hidden: Iterable[int], out_features: int,
                 out_activation: str | None = None, *, rng: np.random.Generator,
                 final_bound: float | None = None):
        self.layers: list[Linear] = []
        prev = in_features
        for width in hidden:
            self.layers.append(Linear(prev, width, rng=rng))
            prev = width
        self.layers.append(Linear(prev, out_features, rng=rng, weight_bound=final_bound))
        self.out_activation = out_activation

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        x = self.layers[-1](x)
        if self.out_activation is not None:
            x = T.activation(self.out_activation, x)
        return x

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}fc{i}.")


# ---------------------------------------------------------------------------
# parameter plumbing shared by trainers


def param_dict(module, prefix: str = "") -> dict[str, Tensor]:
    return dict(module.named_parameters(prefix))


def set_requires_grad(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        if not flag:
            p.grad = None


def snapshot(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in named.items()}


def restore(named: dict[str, Tensor], saved: dict[str, np.ndarray]) -> None:
    for name, p in named.items():
        p.data = saved[name].copy()


def params_equal(a: dict, b: dict) -> bool:
    """Bitwise equality of two parameter dicts (Tensor or ndarray values)."""
    if a.keys() != b.keys():
        return False
    return all(np.array_equal(getattr(a[k], "data", a[k]),
                              getattr(b[k], "data", b[k])) for k in a)


def soft_update(target: dict[str, Tensor], source: dict[str, Tensor], tau: float) -> None:
    """target <- (1 - tau) * target + tau * source; tau=1 is a hard copy."""
    for name, tp in target.items():
        sp = source[name]
        if tau >= 1.0:
            tp.data = sp.data.copy()
        else:
            tp.data = ((1.0 - tau) * tp.data + tau * sp.data).astype(tp.data.dtype)
