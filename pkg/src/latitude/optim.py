"""Adam with an exponentially decaying learning rate."""

from __future__ import annotations

import numpy as np


def exp_decay(lr_start: float, lr_end: float, t: float, total: float) -> float:
    """``lr_start * (lr_end / lr_start) ** (t / total)``."""
    return lr_start * (lr_end / lr_start) ** (t / total)


class Adam:
    def __init__(self, params: list[np.ndarray], betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        """In-place update of every parameter array."""
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
