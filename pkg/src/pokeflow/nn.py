"""Parameterized conv layers shared by the flow sub-networks and encoders."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None,
                 zero_init: bool = False, dtype=np.float32):
        if padding is None:
            padding = kernel // 2
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((kernel, kernel, cin, cout), dtype)
        else:
            w = he_init(rng, (kernel, kernel, cin, cout), kernel * kernel * cin, dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class ConvTranspose2d:
    """Stride-2 3x3 transposed conv that exactly doubles spatial extent."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        w = he_init(rng, (3, 3, cin, cout), 9 * cin, dtype)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.w, self.b, stride=2, padding=1, output_padding=1)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def collect_params(parts: dict[str, object]) -> dict[str, Tensor]:
    """Flatten nested ``params()`` dicts with dotted names."""
    out: dict[str, Tensor] = {}
    for prefix, part in parts.items():
        if isinstance(part, Tensor):
            out[prefix] = part
            continue
        for k, v in part.params().items():
            out[f"{prefix}.{k}"] = v
    return out
