"""Full generative model: frozen sequence AE + condition encoders + flow.

Sampling runs residual draws through the flow's generative pass and the
AE's rollout/decoder; transfer extracts a residual from a source clip and
re-synthesizes it under a different initial frame.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import serialize
from . import tensor as T
from .conditioning import ConditionEncoders, Poke, build_poke_map
from .config import RunConfig
from .features import RandomProjection
from .flows import FlowStack
from .objective import sample_prior
from .seqae import SequenceAE, frames_view
from .tensor import Tensor


class PokeModel:
    """All three networks wired to one RunConfig."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        w = cfg.world
        self.ae = SequenceAE(frames=w.frames, frame_size=w.height,
                             latent_channels=cfg.ae.latent_channels,
                             enc_widths=tuple(cfg.ae.enc_widths),
                             dec_widths=tuple(cfg.ae.dec_widths),
                             seed=cfg.master_seed)
        self.encoders = ConditionEncoders(d_x=cfg.encoders.d_x, d_c=cfg.encoders.d_c,
                                          widths=tuple(cfg.encoders.widths),
                                          seed=cfg.master_seed + 1)
        self.flow = FlowStack(cfg.ae.latent_channels, self.encoders.cond_channels,
                              cfg.flow.blocks, list(cfg.flow.sub_blocks),
                              hidden=cfg.flow.hidden, clamp=cfg.flow.clamp,
                              seed=cfg.master_seed + 2)
        self.projection = RandomProjection(patch=cfg.ae.proj_patch, dim=cfg.ae.proj_dim,
                                           seed=cfg.master_seed + 3)

    # -- conditioning ---------------------------------------------------------

    def cond_tensor(self, x0: np.ndarray, pokes_per_item: list[list[Poke]]) -> Tensor:
        """Stacked condition features for a batch of (x0, pokes) pairs."""
        h, w = x0.shape[1:3]
        maps = np.stack([build_poke_map(p, h, w) for p in pokes_per_item])
        return self.encoders.encode(x0, maps).stacked()

    # -- sampling / transfer ----------------------------------------------------

    def sample(self, x0: np.ndarray, pokes: list[Poke], n_samples: int,
               rng: np.random.Generator, only_last: bool = False) -> np.ndarray:
        """Sample n futures for one (x0, pokes) conditioning.

        Returns (n, T, H, W, C), or (n, H, W, C) when only_last is set.
        """
        g = self.cfg.latent_grid
        r = sample_prior((n_samples, g, g, self.cfg.ae.latent_channels), rng=rng)
        return self.sample_from_residual(x0, pokes, r, only_last=only_last)

    def sample_from_residual(self, x0: np.ndarray, pokes: list[Poke], r: np.ndarray,
                             only_last: bool = False) -> np.ndarray:
        n = r.shape[0]
        with T.no_grad():
            cond = self.cond_tensor(x0[None], [pokes])
            cond = Tensor(np.repeat(cond.data, n, axis=0))
            z, _ = self.flow.forward(Tensor(r), cond)
            x0_rep = np.repeat(x0[None], n, axis=0)
            frames = self.ae.decode_sequence(z, x0_rep, only_last=only_last)
        out = frames_view(frames.data, n)
        return out[:, -1] if only_last else out

    def extract_residual(self, clip: np.ndarray, pokes: list[Poke]) -> np.ndarray:
        """Invert the flow on an encoded clip under its own conditioning."""
        with T.no_grad():
            z = self.ae.encode(clip[None])
            cond = self.cond_tensor(clip[0][None], [pokes])
            r, _ = self.flow.inverse(z, cond)
        return r.data[0]

    def transfer(self, source_clip: np.ndarray, pokes: list[Poke],
                 target_x0: np.ndarray, only_last: bool = False) -> np.ndarray:
        """Apply a source clip's residual kinematics to a new initial frame."""
        r = self.extract_residual(source_clip, pokes)
        return self.sample_from_residual(target_x0, pokes, r[None],
                                         only_last=only_last)[0]

    # -- checkpoints -----------------------------------------------------------------

    def _meta(self, extra: dict | None = None) -> dict:
        meta = {"config_hash": self.cfg.hash(), "seed": self.cfg.master_seed}
        meta.update(extra or {})
        return meta

    def save_ae(self, path, extra: dict | None = None):
        serialize.save_params(path, self.ae.params(), self._meta(extra))

    def save_encoders(self, path, extra: dict | None = None):
        serialize.save_params(path, self.encoders.params(), self._meta(extra))

    def save_flow(self, path, extra: dict | None = None):
        meta = self._meta(extra)
        meta["actnorm_initialized"] = self.flow.initialized
        serialize.save_params(path, self.flow.params(), meta)

    def load_ae(self, path) -> dict:
        return serialize.restore_params(path, self.ae.params())

    def load_encoders(self, path) -> dict:
        return serialize.restore_params(path, self.encoders.params())

    def load_flow(self, path) -> dict:
        meta = serialize.restore_params(path, self.flow.params())
        self.flow.mark_initialized(bool(meta.get("actnorm_initialized", True)))
        return meta

    def load_all(self, run_dir) -> dict:
        run = Path(run_dir)
        metas = {"ae": self.load_ae(run / "ae.pkfw"),
                 "encoders": self.load_encoders(run / "encoders.pkfw"),
                 "flow": self.load_flow(run / "flow.pkfw")}
        return metas
