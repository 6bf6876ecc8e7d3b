"""Invertible layers with tractable log-determinants and their composition.

Layers are oriented along the encoding pass (video code -> residual), the
direction used during likelihood training: ``FlowStack.inverse`` applies
every layer's ``forward`` in construction order, ``FlowStack.forward``
(sampling, residual -> video code) walks the layers backwards through
their ``inverse``. All activations are (N, H, W, C); log-determinants are
per-sample vectors of shape (N,).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, collect_params, he_init
from .tensor import Tensor


class FlowError(RuntimeError):
    pass


def _ones_vec(n: int, dtype) -> Tensor:
    return Tensor(np.ones(n, dtype=dtype))


def soft_clamp(s: Tensor, a: float) -> Tensor:
    """Bound raw log-scales to (-a, a) before exponentiation."""
    return (s * (1.0 / a)).tanh() * a


class ActNorm:
    """Per-channel affine with data-dependent init to unit batch statistics."""

    def __init__(self, channels: int, dtype=np.float32):
        self.scale = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.initialized = False

    def _check_scale(self):
        if np.any(np.abs(self.scale.data) < 1e-12):
            raise FlowError("actnorm: zero scale")

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            mean = x.data.mean(axis=(0, 1, 2))
            std = x.data.std(axis=(0, 1, 2))
            if np.any(std < 1e-8):
                raise FlowError("actnorm: degenerate batch (zero variance channel)")
            self.bias.data[...] = -mean
            self.scale.data[...] = 1.0 / std
            self.initialized = True
        self._check_scale()
        n, h, w, _ = x.shape
        y = (x + self.bias) * self.scale
        ld = self.scale.abs().log().sum() * float(h * w)
        return y, _ones_vec(n, x.dtype) * ld

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        if not self.initialized:
            raise FlowError("actnorm: inverse called before initialization")
        self._check_scale()
        n, h, w, _ = y.shape
        x = y / self.scale - self.bias
        ld = self.scale.abs().log().sum() * float(-h * w)
        return x, _ones_vec(n, y.dtype) * ld

    def params(self) -> dict[str, Tensor]:
        return {"scale": self.scale, "bias": self.bias}


class CouplingSubnet:
    """Two 3x3 convs producing raw (s, t); final layer zero-initialized."""

    def __init__(self, cin: int, cout: int, hidden: int, rng, dtype=np.float32):
        self.c1 = Conv2d(cin, hidden, rng=rng, dtype=dtype)
        self.c2 = Conv2d(hidden, cout, rng=rng, zero_init=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.c2(self.c1(x).elu())

    def params(self):
        return collect_params({"c1": self.c1, "c2": self.c2})


class AffineCoupling:
    """Split channels, transform the second half conditioned on the first.

    y2 = x2 * exp(s(x1, cond)) + t(x1, cond); triangular Jacobian with
    logdet = sum(s). Odd channel counts split floor/ceil.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int,
                 rng, clamp: float = 2.5, subnet=None, dtype=np.float32):
        if channels < 2:
            raise FlowError("coupling: needs at least 2 channels")
        self.c1 = channels // 2
        self.c2 = channels - self.c1
        self.clamp = clamp
        self.subnet = subnet or CouplingSubnet(self.c1 + cond_channels, 2 * self.c2,
                                               hidden, rng, dtype)

    def _st(self, x1: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        if cond.shape[:3] != x1.shape[:3]:
            raise T.ShapeError(
                f"coupling: condition shape {cond.shape} does not align with input {x1.shape}")
        h = self.subnet(T.concat([x1, cond], axis=-1))
        s = soft_clamp(h[..., :self.c2], self.clamp)
        t = h[..., self.c2:]
        return s, t

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        x1 = x[..., :self.c1]
        x2 = x[..., self.c1:]
        s, t = self._st(x1, cond)
        y2 = x2 * s.exp() + t
        return T.concat([x1, y2], axis=-1), s.sum(axis=(1, 2, 3))

    def inverse(self, y: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        y1 = y[..., :self.c1]
        y2 = y[..., self.c1:]
        s, t = self._st(y1, cond)
        x2 = (y2 - t) * (-s).exp()
        return T.concat([y1, x2], axis=-1), -s.sum(axis=(1, 2, 3))

    def params(self):
        return collect_params({"subnet": self.subnet})


class Shuffle:
    """Fixed random channel permutation; logdet exactly zero."""

    def __init__(self, channels: int, rng):
        self.perm = rng.permutation(channels)
        self.inv_perm = np.argsort(self.perm)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return x.permute_channels(self.perm), Tensor(np.zeros(x.shape[0], x.dtype.type))

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        return y.permute_channels(self.inv_perm), Tensor(np.zeros(y.shape[0], y.dtype.type))

    def params(self):
        return {}


# -- causally masked convolution unit ------------------------------------------------


BASE_MASK = np.array([[1, 1, 1],
                      [1, 0, 0],
                      [0, 0, 0]], dtype=np.float64)


def scan_order(h: int, w: int, direction: int) -> list[tuple[int, int]]:
    """Pixel visit order for one of the four 90-degree rotated rasters."""
    coords = np.arange(h * w).reshape(h, w)
    rot = np.rot90(coords, direction)
    return [divmod(int(v), w) for v in rot.reshape(-1)]


def direction_mask(direction: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(BASE_MASK, -direction))


def check_causal(mask: np.ndarray, direction: int, grid: int = 6) -> None:
    """Raise unless every nonzero mask tap points at an already-visited pixel."""
    order = scan_order(grid, grid, direction)
    rank = {p: i for i, p in enumerate(order)}
    k = mask.shape[0]
    c = k // 2
    anchor = order[len(order) // 2 + grid // 2]  # interior pixel
    for u in range(k):
        for v in range(k):
            if mask[u, v] == 0:
                continue
            src = (anchor[0] + u - c, anchor[1] + v - c)
            if src not in rank or rank[src] >= rank[anchor]:
                raise FlowError(
                    f"masked conv: mask tap ({u},{v}) not causal for scan direction {direction}")


class MaskedConvUnit:
    """Directional causally-masked conv producing per-pixel scale/shift.

    Forward is a single parallel pass; the inverse solves pixel-by-pixel
    in scan order, which is exact because (s, t) at a pixel depend only on
    already-reconstructed pixels plus the condition features.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int, rng,
                 scan_direction: int = 0, clamp: float = 2.5,
                 dtype=np.float32, mask: np.ndarray | None = None):
        if scan_direction not in (0, 1, 2, 3):
            raise FlowError(f"masked conv: bad scan direction {scan_direction}")
        self.channels = channels
        self.direction = scan_direction
        self.clamp = clamp
        self.mask = direction_mask(scan_direction) if mask is None else np.asarray(mask, np.float64)
        check_causal(self.mask, scan_direction)
        self._mask_t = Tensor(self.mask.astype(dtype).reshape(3, 3, 1, 1))
        fan = int(self.mask.sum()) * channels
        self.wx = Tensor(he_init(rng, (3, 3, channels, hidden), max(fan, 1), dtype),
                         requires_grad=True)
        self.cond_conv = Conv2d(cond_channels, hidden, rng=rng, dtype=dtype)
        self.out_conv = Conv2d(hidden, 2 * channels, kernel=1, zero_init=True, dtype=dtype)

    def _st(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        if cond.shape[:3] != x.shape[:3]:
            raise T.ShapeError(
                f"masked conv: condition shape {cond.shape} does not align with input {x.shape}")
        f = T.conv2d(x, self.wx * self._mask_t, padding=1) + self.cond_conv(cond)
        st = self.out_conv(f.elu())
        s = soft_clamp(st[..., :self.channels], self.clamp)
        return s, st[..., self.channels:]

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        s, t = self._st(x, cond)
        y = x * s.exp() + t
        return y, s.sum(axis=(1, 2, 3))

    def inverse(self, y: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        n, h, w, _ = y.shape
        x = Tensor(np.zeros_like(y.data))
        logdet = None
        for (i, j) in scan_order(h, w, self.direction):
            s, t = self._st(x, cond)
            xi = (y[:, i, j, :] - t[:, i, j, :]) * (-s[:, i, j, :]).exp()
            nxt = np.array(x.data)
            nxt[:, i, j, :] = xi.data
            x = Tensor(nxt)
        s, t = self._st(x, cond)
        logdet = -s.sum(axis=(1, 2, 3))
        return x, logdet

    def params(self):
        return collect_params({"wx": self.wx, "cond": self.cond_conv, "out": self.out_conv})


# -- composition -----------------------------------------------------------------------


class GlowBlock:
    """Modified glow step: ActNorm -> affine coupling -> channel shuffle."""

    def __init__(self, channels, cond_channels, hidden, rng, clamp, dtype=np.float32):
        self.actnorm = ActNorm(channels, dtype)
        self.coupling = AffineCoupling(channels, cond_channels, hidden, rng, clamp, dtype=dtype)
        self.shuffle = Shuffle(channels, rng)

    def forward(self, x, cond):
        x, ld1 = self.actnorm.forward(x)
        x, ld2 = self.coupling.forward(x, cond)
        x, ld3 = self.shuffle.forward(x)
        return x, ld1 + ld2 + ld3

    def inverse(self, y, cond):
        y, ld3 = self.shuffle.inverse(y)
        y, ld2 = self.coupling.inverse(y, cond)
        y, ld1 = self.actnorm.inverse(y)
        return y, ld1 + ld2 + ld3

    def params(self):
        return collect_params({"actnorm": self.actnorm, "coupling": self.coupling})


class SubBlock:
    """Masked-conv quartet (all four scan directions) plus one glow step."""

    def __init__(self, channels, cond_channels, hidden, rng, clamp, dtype=np.float32):
        self.units = [MaskedConvUnit(channels, cond_channels, hidden, rng,
                                     scan_direction=d, clamp=clamp, dtype=dtype)
                      for d in range(4)]
        self.glow = GlowBlock(channels, cond_channels, hidden, rng, clamp, dtype)

    def forward(self, x, cond):
        total = None
        for u in self.units:
            x, ld = u.forward(x, cond)
            total = ld if total is None else total + ld
        x, ld = self.glow.forward(x, cond)
        return x, total + ld

    def inverse(self, y, cond):
        y, total = self.glow.inverse(y, cond)
        for u in reversed(self.units):
            y, ld = u.inverse(y, cond)
            total = total + ld
        return y, total

    def params(self):
        parts = {f"unit{d}": u for d, u in enumerate(self.units)}
        parts["glow"] = self.glow
        return collect_params(parts)


class FlowBlock:
    def __init__(self, channels, cond_channels, hidden, n_sub, rng, clamp, dtype=np.float32):
        self.subs = [SubBlock(channels, cond_channels, hidden, rng, clamp, dtype)
                     for _ in range(n_sub)]

    def forward(self, x, cond):
        total = None
        for s in self.subs:
            x, ld = s.forward(x, cond)
            total = ld if total is None else total + ld
        return x, total

    def inverse(self, y, cond):
        total = None
        for s in reversed(self.subs):
            y, ld = s.inverse(y, cond)
            total = ld if total is None else total + ld
        return y, total

    def params(self):
        return collect_params({f"sub{i}": s for i, s in enumerate(self.subs)})


class FlowStack:
    """K factor-out blocks forming the conditional bijection between the
    residual code r and the video code z (equal total dimensionality).

    ``inverse(z, cond)`` is the training/encoding pass: after block k,
    floor(d/K) channels leave the stack and join r directly; the last
    block emits the remainder. ``forward(r, cond)`` runs everything
    backwards for sampling.
    """

    def __init__(self, channels: int, cond_channels: int, n_blocks: int,
                 sub_blocks: list[int], hidden: int = 32, clamp: float = 2.5,
                 seed: int = 0, dtype=np.float32):
        if len(sub_blocks) != n_blocks:
            raise FlowError(f"flow stack: len(N)={len(sub_blocks)} != K={n_blocks}")
        emit = [channels // n_blocks] * (n_blocks - 1)
        emit.append(channels - sum(emit))
        if min(emit) < 1:
            raise FlowError(f"flow stack: {channels} channels cannot feed {n_blocks} blocks")
        self.channels = channels
        self.cond_channels = cond_channels
        self.emit = emit
        rng = np.random.default_rng(seed)
        widths = []
        c = channels
        for e in emit:
            widths.append(c)
            c -= e
        self.blocks = [FlowBlock(w, cond_channels, hidden, n, rng, clamp, dtype)
                       for w, n in zip(widths, sub_blocks)]

    def _check(self, x: Tensor, cond: Tensor):
        if x.shape[-1] != self.channels:
            raise T.ShapeError(
                f"flow stack: input has {x.shape[-1]} channels, expected {self.channels}")
        if cond.shape[-1] != self.cond_channels or cond.shape[:3] != x.shape[:3]:
            raise T.ShapeError(
                f"flow stack: condition shape {cond.shape} does not match input {x.shape}")

    def inverse(self, z: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Encoding pass z -> r; returns (r, logdet of this pass)."""
        self._check(z, cond)
        h = z
        outs = []
        total = None
        for k, block in enumerate(self.blocks):
            h, ld = block.forward(h, cond)
            total = ld if total is None else total + ld
            if k < len(self.blocks) - 1:
                outs.append(h[..., :self.emit[k]])
                h = h[..., self.emit[k]:]
            else:
                outs.append(h)
        return T.concat(outs, axis=-1), total

    def forward(self, r: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Sampling pass r -> z; returns (z, logdet of this pass)."""
        self._check(r, cond)
        parts = []
        at = 0
        for e in self.emit:
            parts.append(r[..., at:at + e])
            at += e
        h = None
        total = None
        for k in range(len(self.blocks) - 1, -1, -1):
            g = parts[k] if h is None else T.concat([parts[k], h], axis=-1)
            h, ld = self.blocks[k].inverse(g, cond)
            total = ld if total is None else total + ld
        return h, total

    def params(self) -> dict[str, Tensor]:
        return collect_params({f"block{i}": b for i, b in enumerate(self.blocks)})

    def actnorms(self):
        for b in self.blocks:
            for s in b.subs:
                yield s.glow.actnorm

    @property
    def initialized(self) -> bool:
        return all(a.initialized for a in self.actnorms())

    def mark_initialized(self, value: bool = True) -> None:
        for a in self.actnorms():
            a.initialized = value
