"""Parameter containers shared by the model components."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import RandomSource, Tensor


class Module:
    """Anything holding trainable tensors as attributes, lists or sub-modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            yield from _walk(val, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(val, name: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")


def param(data: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: RandomSource, dtype=np.float32):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype)
        self.bias = param(np.zeros(fan_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


class Norm(Module):
    """Scale and shift of a layer or group normalization."""

    def __init__(self, width: int, dtype=np.float32):
        self.weight = param(np.ones(width), dtype)
        self.bias = param(np.zeros(width), dtype)

    def layer(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.weight, self.bias)

    def group(self, x: Tensor, groups: int) -> Tensor:
        return nx.group_norm(x, self.weight, self.bias, groups)
