"""Adam optimizer with exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Param


@dataclass
class OptimizerConfig:
    lr0: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    decay_rate: float = 0.9
    decay_steps: int = 100

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.decay_steps <= 0:
            raise ValueError("decay_steps must be positive")


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    lr(epoch) = lr0 * decay_rate ** (epoch / decay_steps).
    """

    def __init__(self, params: list[Param], cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0

    def lr_at(self, epoch) -> float:
        return self.cfg.lr0 * self.cfg.decay_rate ** (epoch / self.cfg.decay_steps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, epoch=0):
        cfg = self.cfg
        self.t += 1
        lr = self.lr_at(epoch)
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            p.adam_m *= cfg.beta1
            p.adam_m += (1.0 - cfg.beta1) * g
            p.adam_v *= cfg.beta2
            p.adam_v += (1.0 - cfg.beta2) * (g * g)
            p.data -= (lr * (p.adam_m / c1)
                       / (np.sqrt(p.adam_v / c2) + cfg.eps)).astype(p.dtype)
