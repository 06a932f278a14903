"""Adam with linear warmup followed by inverse square-root decay."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from saa.tensor import Tensor


def warmup_inverse_sqrt(step: int, base_lr: float, warmup: int) -> float:
    step = max(step, 1)
    if warmup <= 0:
        return base_lr / math.sqrt(step)
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, warmup: int = 400,
                 betas=(0.9, 0.98), eps: float = 1e-9, clip: float = 0.0):
        self.params = list(params)
        self.base_lr = lr
        self.warmup = warmup
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return warmup_inverse_sqrt(self.t, self.base_lr, self.warmup)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params))

    def step(self) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        self.t += 1
        norm = self.grad_norm()
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        lr = self.lr
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
