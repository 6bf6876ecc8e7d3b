"""Fixed random-projection patch features, the perceptual-metric stand-in."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class RandomProjection:
    """Seeded linear projection of non-overlapping patches.

    Implemented as a frozen stride-``patch`` convolution so it can sit
    inside a differentiable loss; the kernel never trains.
    """

    def __init__(self, patch: int = 8, dim: int = 128, channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        fan = patch * patch * channels
        k = rng.standard_normal((patch, patch, channels, dim)).astype(np.float32) / np.sqrt(fan)
        self.patch = patch
        self.kernel = Tensor(k)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, stride=self.patch, padding=0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(x)).data
