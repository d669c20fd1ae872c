from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import ContractError, Tensor


class Adam:
    """Adam with bias correction. Gradients are zeroed after every step."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"adam_step: parameter {p.name or p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if m.shape != p.data.shape:
                raise ContractError(f"adam_step: moment shape {m.shape} != parameter shape {p.shape}")
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[...] = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
