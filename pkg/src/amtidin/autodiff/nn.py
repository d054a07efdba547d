"""Parameter containers for the layers the network needs."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal module tree with named parameters, buffers and a train flag."""

    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield f"{name}.{_key(key)}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _key(key) -> str:
    return "_".join(key) if isinstance(key, tuple) else str(key)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = parameter(kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = parameter(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class SNLinear(Module):
    """Linear layer whose weight is divided by its spectral-norm estimate."""

    _buffers = ("u",)

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype=np.float32,
        n_power_iters: int = 1,
    ):
        self.weight = parameter(kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = parameter(np.zeros(out_features, dtype=dtype))
        u = rng.standard_normal(out_features)
        self.u = (u / np.linalg.norm(u)).astype(np.float64)
        self.n_power_iters = n_power_iters

    def normalized_weight(self) -> Tensor:
        # A zero matrix has no direction to normalize; it maps everything to the bias.
        if not np.any(self.weight.data):
            return self.weight
        # The singular vector estimate only advances while training.
        if self.training:
            return F.spectral_normalize(self.weight, self.u, self.n_power_iters)
        u = self.u.copy()
        return F.spectral_normalize(self.weight, u, 1)

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.normalized_weight(), self.bias)


class Conv1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        padding: int,
        rng: np.random.Generator,
        dtype=np.float32,
        channels_last: bool = False,
    ):
        fan_in = in_channels * kernel_size
        self.weight = parameter(kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in, dtype))
        self.bias = parameter(np.zeros(out_channels, dtype=dtype))
        self.padding = padding
        self.channels_last = channels_last

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, padding=self.padding, channels_last=self.channels_last)


class BatchNorm1d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(
        self,
        features: int,
        dtype=np.float32,
        momentum: float = 0.1,
        eps: float = 1e-5,
        channels_last: bool = False,
    ):
        self.gamma = parameter(np.ones(features, dtype=dtype))
        self.beta = parameter(np.zeros(features, dtype=dtype))
        self.running_mean = np.zeros(features, dtype=np.float64)
        self.running_var = np.ones(features, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps
        self.channels_last = channels_last

    def __call__(self, x: Tensor) -> Tensor:
        return F.batchnorm1d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
            channels_last=self.channels_last,
        )
