"""Adam optimizer and the two learning-rate schedules used for training."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, gradients


class Adam:
    """Adam with (non-decoupled) weight decay added to the gradient."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999,
                 weight_decay: float = 1e-5, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, loss: Tensor) -> float:
        """Backward + parameter update; returns the global gradient norm."""
        keys = list(self.params)
        grads = gradients(loss, [self.params[k] for k in keys])
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        sq = 0.0
        for k, g in zip(keys, grads):
            p = self.params[k]
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            sq += float(np.sum(g.astype(np.float64) ** 2))
            m = self._m[k]
            v = self._v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        return float(np.sqrt(sq))


def warmup_linear_decay(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Ramp 0 -> peak over ``warmup_steps``, then decay linearly to 0."""
    if step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    frac = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return peak * max(0.0, 1.0 - frac)


def exponential_decay(step: int, base: float, decay: float = 0.999, every: int = 10) -> float:
    return base * decay ** (step // every)
