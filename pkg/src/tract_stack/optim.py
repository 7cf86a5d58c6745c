"""Parameter update rules. Both update tensors in place, in declared order."""

from __future__ import annotations

from typing import Mapping, Protocol

import numpy as np

from tract_stack.errors import ConfigError


class Optimizer(Protocol):
    name: str

    def step(
        self, tensors: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float
    ) -> None: ...


class SGD:
    name = "sgd"

    def step(self, tensors, grads, lr):
        for key, tensor in tensors.items():
            tensor -= tensor.dtype.type(lr) * grads[key]


class Adam:
    name = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, tensors, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1**self.t
        correction2 = 1.0 - b2**self.t
        for key, tensor in tensors.items():
            g = grads[key]
            m = self._m.setdefault(key, np.zeros_like(tensor))
            v = self._v.setdefault(key, np.zeros_like(tensor))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            tensor -= update.astype(tensor.dtype, copy=False)


def make_optimizer(name: str, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Optimizer:
    if name == "adam":
        return Adam(beta1, beta2, eps)
    if name == "sgd":
        return SGD()
    raise ConfigError(f"unknown optimizer '{name}'")
