"""Parameter containers built on the autograd ops."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .autograd import Tensor, conv2d, layer_norm, leaky_relu, matmul, relu


class Module:
    """Base class: parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            if p.shape != tuple(state[k].shape):
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1):
        bound = np.sqrt(6.0 / (cin * k * k))  # He-uniform
        self.weight = _param(rng.uniform(-bound, bound, (cout, cin, k, k)))
        self.bias = _param(np.zeros(cout))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class Linear(Module):
    """``y = x @ W + b`` over the last axis."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, zero: bool = False):
        bound = np.sqrt(6.0 / cin)
        w = np.zeros((cin, cout)) if zero else rng.uniform(-bound, bound, (cin, cout))
        self.weight = _param(w)
        self.bias = _param(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class MLP(Module):
    """Stack of Linear layers with relu between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False):
        n = len(sizes) - 1
        self.layers = [Linear(sizes[i], sizes[i + 1], rng, zero=zero_last and i == n - 1) for i in range(n)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, channels: int):
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class ResBlock(Module):
    """conv - leaky relu - conv, plus identity skip."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.conv2.weight.data *= 0.1

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(leaky_relu(self.conv1(x)))
