"""First-order optimizers over lists of parameter tensors."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def state_arrays(self) -> List[np.ndarray]:
        return []

    def load_state_arrays(self, t: int, arrays: List[np.ndarray]) -> None:
        self.t = t


class Adam:
    """Adam with bias correction; moments are kept per parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            step = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> List[np.ndarray]:
        return self.m + self.v

    def load_state_arrays(self, t: int, arrays: List[np.ndarray]) -> None:
        n = len(self.params)
        if len(arrays) != 2 * n:
            raise UsageError("optimizer state does not match parameter count")
        self.t = t
        self.m = [np.array(a) for a in arrays[:n]]
        self.v = [np.array(a) for a in arrays[n:]]


OPTIMIZERS: Dict[str, type] = {"sgd": SGD, "adam": Adam}


def make_optimizer(name: str, params: Sequence[Tensor], lr: float):
    try:
        return OPTIMIZERS[name](params, lr=lr)
    except KeyError:
        raise UsageError(f"unknown optimizer {name!r}") from None
