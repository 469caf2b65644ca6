"""Adam with a one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograd import Tensor


class OneCycle:
    """Linear warmup to max_lr, then cosine anneal toward ~0.

    warmup covers `pct_start` of the run; the floor is max_lr / final_div.
    """

    def __init__(self, max_lr: float, total_steps: int,
                 pct_start: float = 0.3, start_div: float = 25.0,
                 final_div: float = 1e4):
        self.max_lr = float(max_lr)
        self.total_steps = max(1, int(total_steps))
        self.pct_start = pct_start
        self.start_div = start_div
        self.final_div = final_div

    def lr_at(self, step: int) -> float:
        warm = max(1, int(round(self.total_steps * self.pct_start)))
        if step < warm:
            lo = self.max_lr / self.start_div
            return lo + (self.max_lr - lo) * (step / warm)
        span = max(1, self.total_steps - warm)
        t = min(1.0, (step - warm) / span)
        floor = self.max_lr / self.final_div
        return floor + (self.max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


class Adam:
    """Standard Adam over an ordered parameter list (deterministic iteration)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
