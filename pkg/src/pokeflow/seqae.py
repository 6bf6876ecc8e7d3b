"""Sequence autoencoder: video encoder, latent conv-GRU rollout, frame decoder.

The encoder compresses a T-frame clip into one compact spatial code z;
the code initializes every hidden layer of a 4-layer convolutional GRU
whose per-step states are decoded back to frames, conditioned on the
first frame. Trained once, then frozen as the flow's data space.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .features import RandomProjection
from .nn import Conv2d, ConvTranspose2d, collect_params
from .tensor import Tensor


class ResBlock:
    def __init__(self, channels: int, rng):
        self.c1 = Conv2d(channels, channels, rng=rng)
        self.c2 = Conv2d(channels, channels, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.c2(self.c1(x.elu()).elu())

    def params(self):
        return collect_params({"c1": self.c1, "c2": self.c2})


class VideoEncoder:
    """Stride-2 residual pyramid on time-stacked frames -> (N, h, w, d)."""

    def __init__(self, frames: int, frame_channels: int, latent_channels: int,
                 widths: tuple[int, int] = (32, 48), seed: int = 0):
        rng = np.random.default_rng(seed)
        w1, w2 = widths
        self.frames = frames
        self.frame_channels = frame_channels
        self.stem = Conv2d(frames * frame_channels, w1, stride=2, rng=rng)
        self.res1 = ResBlock(w1, rng)
        self.down1 = Conv2d(w1, w2, stride=2, rng=rng)
        self.res2 = ResBlock(w2, rng)
        self.down2 = Conv2d(w2, w2, stride=2, rng=rng)
        self.head = Conv2d(w2, latent_channels, kernel=1, rng=rng)

    def __call__(self, clips: np.ndarray) -> Tensor:
        """clips (N, T, H, W, C); time folds into channels before the stem."""
        n, t, h, w, c = clips.shape
        if t != self.frames or c != self.frame_channels:
            raise T.ShapeError(
                f"encode_video: clip shape {clips.shape} does not match config "
                f"(T={self.frames}, C={self.frame_channels})")
        x = Tensor(np.ascontiguousarray(clips.transpose(0, 2, 3, 1, 4)).reshape(n, h, w, t * c))
        x = self.res1(self.stem(x).elu())
        x = self.res2(self.down1(x.elu()).elu())
        return self.head(self.down2(x.elu()).elu())

    def params(self):
        return collect_params({"stem": self.stem, "res1": self.res1, "down1": self.down1,
                               "res2": self.res2, "down2": self.down2, "head": self.head})


class ConvGRUCell:
    """3x3 conv GRU; update gate at 1 carries the previous state through."""

    def __init__(self, in_channels: int, hidden_channels: int, rng):
        self.gates = Conv2d(in_channels + hidden_channels, 2 * hidden_channels, rng=rng)
        self.cand = Conv2d(in_channels + hidden_channels, hidden_channels, rng=rng)
        self.ch = hidden_channels

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        zr = self.gates(T.concat([x, h], axis=-1)).sigmoid()
        u = zr[..., :self.ch]
        r = zr[..., self.ch:]
        n = self.cand(T.concat([x, r * h], axis=-1)).tanh()
        return u * h + (1.0 - u) * n

    def params(self):
        return collect_params({"gates": self.gates, "cand": self.cand})


class LatentRollout:
    """4 stacked conv-GRU layers; z initializes every layer's hidden state.

    The bottom layer's input is a learned constant (zero-initialized).
    """

    def __init__(self, channels: int, grid: tuple[int, int], layers: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cells = [ConvGRUCell(channels, channels, rng) for _ in range(layers)]
        self.input_const = Tensor(np.zeros((1, grid[0], grid[1], channels), np.float32),
                                  requires_grad=True)

    def __call__(self, z: Tensor, steps: int) -> list[Tensor]:
        if steps < 1:
            raise ValueError(f"rollout: steps must be >= 1, got {steps}")
        n = z.shape[0]
        hidden = [z] * len(self.cells)
        const = self.input_const * Tensor(np.ones((n, 1, 1, 1), np.float32))
        out = []
        for _ in range(steps):
            x = const
            for i, cell in enumerate(self.cells):
                hidden[i] = cell(x, hidden[i])
                x = hidden[i]
            out.append(hidden[-1])
        return out

    def params(self):
        parts = {f"cell{i}": c for i, c in enumerate(self.cells)}
        parts["input_const"] = self.input_const
        return collect_params(parts)


class UpBlock:
    """Residual 2x upsampling: transposed conv main path, cheap 1x1 skip."""

    def __init__(self, cin: int, cout: int, rng):
        self.up = ConvTranspose2d(cin, cout, rng)
        self.conv = Conv2d(cout, cout, rng=rng)
        self.skip = Conv2d(cin, cout, kernel=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.skip(T.upsample2x(x)) + self.conv(self.up(x).elu())

    def params(self):
        return collect_params({"up": self.up, "conv": self.conv, "skip": self.skip})


def pool_pyramid(x0: np.ndarray, levels: int) -> list[np.ndarray]:
    """Mean-pooled copies of x0 at 1x, 2x, ... 2^levels downsampling."""
    out = [x0]
    cur = x0
    for _ in range(levels):
        n, h, w, c = cur.shape
        cur = cur.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
        out.append(cur)
    return out[::-1]


class FrameDecoder:
    """Latent grid -> frame; a resized x0 is concatenated at every stage."""

    def __init__(self, latent_channels: int, frame_channels: int = 3,
                 widths: tuple[int, int, int] = (32, 24, 16), seed: int = 0):
        rng = np.random.default_rng(seed)
        w1, w2, w3 = widths
        fc = frame_channels
        self.up1 = UpBlock(latent_channels + fc, w1, rng)
        self.up2 = UpBlock(w1 + fc, w2, rng)
        self.up3 = UpBlock(w2 + fc, w3, rng)
        self.head = Conv2d(w3 + fc, frame_channels, rng=rng)

    def __call__(self, z: Tensor, x0_pyramid: list[np.ndarray]) -> Tensor:
        p4, p8, p16, p32 = x0_pyramid
        x = self.up1(T.concat([z, Tensor(p4)], axis=-1)).elu()
        x = self.up2(T.concat([x, Tensor(p8)], axis=-1)).elu()
        x = self.up3(T.concat([x, Tensor(p16)], axis=-1)).elu()
        return self.head(T.concat([x, Tensor(p32)], axis=-1)).sigmoid()

    def params(self):
        return collect_params({"up1": self.up1, "up2": self.up2,
                               "up3": self.up3, "head": self.head})


class SequenceAE:
    def __init__(self, frames: int = 10, frame_size: int = 32, frame_channels: int = 3,
                 latent_channels: int = 16, seed: int = 0,
                 enc_widths: tuple[int, int] = (32, 48),
                 dec_widths: tuple[int, int, int] = (32, 24, 16)):
        grid = frame_size // 8
        self.frames = frames
        self.frame_size = frame_size
        self.grid = (grid, grid)
        self.latent_channels = latent_channels
        self.encoder = VideoEncoder(frames, frame_channels, latent_channels,
                                    widths=enc_widths, seed=seed)
        self.rollout = LatentRollout(latent_channels, self.grid, seed=seed + 1)
        self.decoder = FrameDecoder(latent_channels, frame_channels,
                                    widths=dec_widths, seed=seed + 2)

    def encode(self, clips: np.ndarray) -> Tensor:
        return self.encoder(clips)

    def decode_sequence(self, z: Tensor, x0: np.ndarray, steps: int | None = None,
                        only_last: bool = False) -> Tensor:
        """Decoded frames stacked time-major: (T_out * N, H, W, C).

        All rollout steps go through the decoder as one batch; use
        :func:`frames_view` to regroup as (T_out, N, H, W, C).
        """
        steps = steps or self.frames
        latents = self.rollout(z, steps)
        if only_last:
            latents = latents[-1:]
        stacked = T.concat(latents, axis=0) if len(latents) > 1 else latents[0]
        x0_rep = np.concatenate([x0] * len(latents), axis=0)
        return self.decoder(stacked, pool_pyramid(x0_rep, 3))

    def reconstruct(self, clips: np.ndarray) -> Tensor:
        return self.decode_sequence(self.encode(clips), clips[:, 0])

    def params(self):
        return collect_params({"enc": self.encoder, "gru": self.rollout,
                               "dec": self.decoder})


def frames_view(decoded: np.ndarray, batch: int) -> np.ndarray:
    """Regroup a time-major frame stack (T*N, H, W, C) as (N, T, H, W, C)."""
    t = decoded.shape[0] // batch
    return decoded.reshape(t, batch, *decoded.shape[1:]).transpose(1, 0, 2, 3, 4)


def stack_target(target: np.ndarray) -> np.ndarray:
    """(N, T, H, W, C) clip -> time-major (T*N, H, W, C) frame stack."""
    n, t = target.shape[:2]
    return np.ascontiguousarray(target.transpose(1, 0, 2, 3, 4)).reshape(t * n, *target.shape[2:])


def rec_loss(target: np.ndarray, decoded: Tensor,
             projection: RandomProjection | None = None,
             lambda_f: float = 1.0) -> Tensor:
    """Per-frame L1 plus projected-feature MSE, mean reduction, averaged over T.

    ``decoded`` is the time-major frame stack from decode_sequence.
    """
    ref_np = stack_target(target)
    if ref_np.shape != decoded.shape:
        raise T.ShapeError(f"rec_loss: target {target.shape} vs decoded {decoded.shape}")
    ref = Tensor(ref_np)
    loss = (decoded - ref).abs().mean()
    if projection is not None and lambda_f:
        loss = loss + lambda_f * ((projection(decoded) - projection(ref)) ** 2).mean()
    return loss
