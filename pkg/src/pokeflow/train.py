"""Training loops: sequence AE, condition encoders, then the flow.

The AE trains first and is frozen; the condition encoders pretrain with
throwaway decoders; flow training minimizes the exact likelihood loss on
encoded clips. Every 12th training item is a background poke whose target
is a still sequence, teaching the model to ignore off-object controls.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import tensor as T
from .conditioning import build_poke_map, pretrain_condition_encoders
from .config import RunConfig, substream
from .dataset import EpisodeStore
from .objective import nll_loss
from .optim import Adam, exponential_decay, warmup_linear_decay
from .pipeline import PokeModel
from .seqae import rec_loss
from .tensor import NumericError, Tensor
from .toyworld import background_poke, sample_pokes

log = logging.getLogger(__name__)

BACKGROUND_EVERY = 12


class MetricsLog:
    """Step-indexed plain delimited text log."""

    def __init__(self, path, columns: list[str]):
        self.path = Path(path)
        self.columns = columns
        self.path.write_text("\t".join(["step"] + columns) + "\n")

    def append(self, step: int, values: list[float]):
        with self.path.open("a") as f:
            f.write("\t".join([str(step)] + [f"{v:.6g}" for v in values]) + "\n")


def _still_clip(clip: np.ndarray) -> np.ndarray:
    return np.repeat(clip[0][None], clip.shape[0], axis=0)


def train_ae(model: PokeModel, store: EpisodeStore, out_dir,
             steps: int | None = None) -> Path:
    cfg = model.cfg
    steps = cfg.ae.steps if steps is None else steps
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "ae.pkfw"
    ids = store.ids("train")
    clips = np.stack([store.load(i).frames for i in ids])
    rng = substream(cfg.master_seed, "ae-train")
    opt = Adam(model.ae.params(), lr=cfg.ae.lr, beta1=cfg.ae.beta1,
               beta2=cfg.ae.beta2, weight_decay=cfg.ae.weight_decay)
    mlog = MetricsLog(out / "ae_metrics.tsv", ["loss", "grad_norm", "lr"])
    item = 0
    for step in range(steps):
        idx = rng.integers(0, len(clips), size=min(cfg.ae.batch, len(clips)))
        batch = clips[idx].copy()
        for b in range(len(batch)):
            if item % BACKGROUND_EVERY == 0:
                batch[b] = _still_clip(batch[b])
            item += 1
        loss = rec_loss(batch, model.ae.reconstruct(batch),
                        model.projection, cfg.ae.lambda_f)
        if not np.isfinite(loss.item()):
            raise NumericError(
                f"AE loss non-finite at step {step}; last checkpoint kept at {ckpt}")
        opt.lr = exponential_decay(step, cfg.ae.lr, cfg.ae.lr_decay, 10)
        gn = opt.step(loss)
        mlog.append(step, [loss.item(), gn, opt.lr])
        if step % 50 == 0:
            log.info("ae step %d loss=%.4f", step, loss.item())
        if cfg.ae.ckpt_every and (step + 1) % cfg.ae.ckpt_every == 0:
            model.save_ae(ckpt, {"step": step + 1})
    model.save_ae(ckpt, {"step": steps})
    return ckpt


def pretrain_encoders(model: PokeModel, store: EpisodeStore, out_dir,
                      steps: int | None = None) -> Path:
    cfg = model.cfg
    steps = cfg.encoders.steps if steps is None else steps
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "encoders.pkfw"
    ids = store.ids("train")
    rng = substream(cfg.master_seed, "encoder-pretrain")
    frames, flows, maps = [], [], []
    h, w = cfg.world.height, cfg.world.width
    for i in ids:
        ep = store.load(i)
        frames.append(ep.frames[0])
        flows.append(ep.flow)
        try:
            pokes = sample_pokes(ep.flow, int(rng.integers(1, 6)), rng)
        except ValueError:
            pokes = []
        maps.append(build_poke_map(pokes, h, w))
    hist = pretrain_condition_encoders(
        model.encoders, np.stack(frames), np.stack(flows), np.stack(maps),
        steps=steps, batch=cfg.encoders.batch, lr=cfg.encoders.lr,
        seed=cfg.master_seed)
    model.save_encoders(ckpt, {"steps": steps,
                               "final_frame_l1": hist["frame_l1"][-1] if hist["frame_l1"] else None,
                               "final_flow_l1": hist["flow_l1"][-1] if hist["flow_l1"] else None})
    return ckpt


class FlowTrainData:
    """Cached per-episode arrays for flow training (AE and encoders frozen)."""

    def __init__(self, model: PokeModel, store: EpisodeStore, split: str = "train"):
        ids = store.ids(split)
        self.episodes = [store.load(i) for i in ids]
        clips = np.stack([e.frames for e in self.episodes])
        stills = np.stack([_still_clip(e.frames) for e in self.episodes])
        self.z = _encode_chunked(model, clips)
        self.z_still = _encode_chunked(model, stills)
        with T.no_grad():
            x0 = clips[:, 0]
            self.f_x0 = model.encoders.phi_x0(Tensor(x0)).data
        self.x0 = clips[:, 0]


def _encode_chunked(model: PokeModel, clips: np.ndarray, chunk: int = 16) -> np.ndarray:
    outs = []
    with T.no_grad():
        for a in range(0, len(clips), chunk):
            outs.append(model.ae.encode(clips[a:a + chunk]).data)
    return np.concatenate(outs, axis=0)


def flow_training_batch(model: PokeModel, data: FlowTrainData, rng,
                        batch: int, item_counter: int) -> tuple[Tensor, Tensor, int]:
    """One (z, cond) batch with poke resampling and the 1-in-12 background rule."""
    h, w = model.cfg.world.height, model.cfg.world.width
    zs, maps, idxs = [], [], []
    n = len(data.episodes)
    for _ in range(batch):
        j = int(rng.integers(0, n))
        ep = data.episodes[j]
        if item_counter % BACKGROUND_EVERY == 0:
            pokes, _ = background_poke(ep, rng)
            zs.append(data.z_still[j])
        else:
            try:
                pokes = sample_pokes(ep.flow, int(rng.integers(1, 6)), rng)
            except ValueError:
                pokes = sample_pokes(ep.flow, 1, rng)
            zs.append(data.z[j])
        maps.append(build_poke_map(pokes, h, w))
        idxs.append(j)
        item_counter += 1
    x0 = data.x0[idxs]
    with T.no_grad():
        f_c = model.encoders.phi_c(
            Tensor(np.concatenate([np.stack(maps), x0], axis=-1))).data
    cond = Tensor(np.concatenate([data.f_x0[idxs], f_c], axis=-1))
    return Tensor(np.stack(zs)), cond, item_counter


def train_flow(model: PokeModel, store: EpisodeStore, out_dir,
               steps: int | None = None) -> Path:
    """Likelihood training of the flow on frozen AE codes.

    A zero-step run still writes a sampleable identity checkpoint.
    """
    cfg = model.cfg
    steps = cfg.flow.steps if steps is None else steps
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "flow.pkfw"
    rng = substream(cfg.master_seed, "flow-train")
    mlog = MetricsLog(out / "flow_metrics.tsv",
                      ["nll", "prior_term", "logdet_term", "grad_norm", "lr"])
    if steps == 0:
        model.flow.mark_initialized()
        model.save_flow(ckpt, {"step": 0})
        return ckpt
    data = FlowTrainData(model, store)
    opt = Adam(model.flow.params(), lr=cfg.flow.lr, beta1=cfg.flow.beta1,
               beta2=cfg.flow.beta2, weight_decay=cfg.flow.weight_decay)
    item = 0
    for step in range(steps):
        z, cond, item = flow_training_batch(model, data, rng, cfg.flow.batch, item)
        report = nll_loss(z, cond, model.flow)
        if not np.isfinite(report.nll.item()):
            raise NumericError(
                f"flow nll non-finite at step {step}; last checkpoint kept at {ckpt}")
        opt.lr = warmup_linear_decay(step, cfg.flow.lr, cfg.flow.warmup_steps, steps)
        gn = opt.step(report.nll)
        mlog.append(step, [report.nll.item(), report.prior_term.item(),
                           report.logdet_term.item(), gn, opt.lr])
        if step % 100 == 0:
            log.info("flow step %d nll=%.3f", step, report.nll.item())
        if cfg.flow.ckpt_every and (step + 1) % cfg.flow.ckpt_every == 0:
            model.save_flow(ckpt, {"step": step + 1})
    model.save_flow(ckpt, {"step": steps})
    return ckpt
