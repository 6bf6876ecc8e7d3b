"""Spatial poke maps and the two condition encoders feeding the flow.

A poke is the desired displacement of a single pixel between the first
and last frame. Pokes are embedded as a sparse two-channel H x W map; the
frame and the poke map are encoded by two dedicated stride-2 conv
pyramids down to the flow's spatial grid, pretrained with throwaway
decoders and frozen afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvTranspose2d, collect_params
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Poke:
    """One local control input: shift (dy, dx) applied at pixel (row, col)."""
    shift: tuple[float, float]
    location: tuple[int, int]


def build_poke_map(pokes: list[Poke], height: int, width: int) -> np.ndarray:
    """Sparse (H, W, 2) map, nonzero only at poked pixels.

    Overlapping pokes at one pixel: last writer wins (logged).
    """
    c = np.zeros((height, width, 2), dtype=np.float32)
    seen: set[tuple[int, int]] = set()
    for p in pokes:
        r, col = int(p.location[0]), int(p.location[1])
        if not (0 <= r < height and 0 <= col < width):
            raise ValueError(f"poke location ({r},{col}) outside {height}x{width} frame")
        if (r, col) in seen:
            log.warning("overlapping pokes at pixel (%d,%d); last writer wins", r, col)
        seen.add((r, col))
        c[r, col, 0] = p.shift[0]
        c[r, col, 1] = p.shift[1]
    return c


@dataclass
class ConditionFeatures:
    """Outputs of the two encoders, spatially aligned with the flow input."""
    f_x0: np.ndarray  # (N, h, w, d_x)
    f_c: np.ndarray   # (N, h, w, d_c)

    def stacked(self) -> Tensor:
        return Tensor(np.concatenate([self.f_x0, self.f_c], axis=-1))


class _Pyramid:
    """Three stride-2 conv stages (ELU between, linear output)."""

    def __init__(self, cin: int, dout: int, widths: tuple[int, int], rng):
        w1, w2 = widths
        self.s1 = Conv2d(cin, w1, stride=2, rng=rng)
        self.s2 = Conv2d(w1, w2, stride=2, rng=rng)
        self.s3 = Conv2d(w2, dout, stride=2, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.s3(self.s2(self.s1(x).elu()).elu())

    def params(self):
        return collect_params({"s1": self.s1, "s2": self.s2, "s3": self.s3})


class _UpPyramid:
    """Throwaway decoder: three stride-2 transposed conv stages."""

    def __init__(self, din: int, cout: int, widths: tuple[int, int], rng):
        w1, w2 = widths
        self.s1 = ConvTranspose2d(din, w2, rng)
        self.s2 = ConvTranspose2d(w2, w1, rng)
        self.s3 = ConvTranspose2d(w1, cout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.s3(self.s2(self.s1(x).elu()).elu())

    def params(self):
        return collect_params({"s1": self.s1, "s2": self.s2, "s3": self.s3})


class ConditionEncoders:
    """Frame encoder and poke-map encoder (the poke encoder also sees x0)."""

    def __init__(self, frame_channels: int = 3, d_x: int = 8, d_c: int = 8,
                 widths: tuple[int, int] = (16, 32), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_x = d_x
        self.d_c = d_c
        self.frame_channels = frame_channels
        self.phi_x0 = _Pyramid(frame_channels, d_x, widths, rng)
        self.phi_c = _Pyramid(frame_channels + 2, d_c, widths, rng)

    @property
    def cond_channels(self) -> int:
        return self.d_x + self.d_c

    def encode(self, x0: np.ndarray, poke_map: np.ndarray) -> ConditionFeatures:
        """x0 (N,H,W,C) and poke map (N,H,W,2) -> features at the flow grid."""
        if x0.shape[:3] != poke_map.shape[:3]:
            raise T.ShapeError(
                f"encode_condition: frame {x0.shape} vs poke map {poke_map.shape}")
        with T.no_grad():
            f_x0 = self.phi_x0(Tensor(x0)).data
            f_c = self.phi_c(Tensor(np.concatenate([poke_map, x0], axis=-1))).data
        return ConditionFeatures(f_x0=f_x0, f_c=f_c)

    def params(self):
        return collect_params({"phi_x0": self.phi_x0, "phi_c": self.phi_c})


def pretrain_condition_encoders(encoders: ConditionEncoders,
                                frames: np.ndarray, flows: np.ndarray,
                                poke_maps: np.ndarray,
                                steps: int = 2000, batch: int = 16,
                                lr: float = 1e-3, seed: int = 0,
                                log_every: int = 200) -> dict:
    """Train both encoders through throwaway decoders, then discard those.

    Frame encoder reconstructs x0 (L1); the poke encoder, given the poke
    map and x0, reconstructs the dense flow field (L1). Returns final
    losses; the encoders are meant to be frozen afterwards.
    """
    rng = np.random.default_rng(seed)
    dec_rng = np.random.default_rng(seed + 1)
    dec_x0 = _UpPyramid(encoders.d_x, encoders.frame_channels, (16, 32), dec_rng)
    dec_c = _UpPyramid(encoders.d_c, 2, (16, 32), dec_rng)
    opt_x0 = Adam({**{f"e.{k}": v for k, v in encoders.phi_x0.params().items()},
                   **{f"d.{k}": v for k, v in dec_x0.params().items()}}, lr=lr)
    opt_c = Adam({**{f"e.{k}": v for k, v in encoders.phi_c.params().items()},
                  **{f"d.{k}": v for k, v in dec_c.params().items()}}, lr=lr)
    n = frames.shape[0]
    hist = {"frame_l1": [], "flow_l1": []}
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        x0 = Tensor(frames[idx])
        rec = dec_x0(encoders.phi_x0(x0)).sigmoid()
        loss_x0 = (rec - x0).abs().mean()
        opt_x0.step(loss_x0)

        cmaps = np.concatenate([poke_maps[idx], frames[idx]], axis=-1)
        rec_f = dec_c(encoders.phi_c(Tensor(cmaps)))
        loss_c = (rec_f - Tensor(flows[idx])).abs().mean()
        opt_c.step(loss_c)

        if not (np.isfinite(loss_x0.item()) and np.isfinite(loss_c.item())):
            raise TrainingDiverged(
                f"encoder pretraining diverged at step {step} (seed {seed})")
        hist["frame_l1"].append(loss_x0.item())
        hist["flow_l1"].append(loss_c.item())
        if log_every and step % log_every == 0:
            log.info("encoder pretrain step %d frame_l1=%.4f flow_l1=%.4f",
                     step, loss_x0.item(), loss_c.item())
    return hist
