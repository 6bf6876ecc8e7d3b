"""Evaluation procedures re-grounded on toy-world ground truth.

Keypoint estimators and perceptual metrics are replaced by the toy
world's node tracks (recovered from rendered frames by color-matched
localization) and the fixed random-projection features. The protocols --
which quantities, which sample counts -- follow the source procedures.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import Poke, build_poke_map
from .dataset import EpisodeStore
from .features import RandomProjection
from .pipeline import PokeModel
from .toyworld import (ChainConfig, Episode, direction_sweep_pokes, node_assignment,
                       node_colors, sample_pokes)

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    metric: str
    values: dict
    sample_counts: dict
    config_hash: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)


def write_report(report: EvalReport, out_dir, extra_tables: dict[str, np.ndarray] | None = None):
    """Emit the machine-readable summary plus delimited text tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{report.metric}.json").write_text(report.to_json())
    for name, table in (extra_tables or {}).items():
        rows = np.atleast_2d(np.asarray(table, dtype=np.float64))
        lines = ["\t".join(f"{v:.6g}" for v in row) for row in rows]
        (out / f"{report.metric}_{name}.tsv").write_text("\n".join(lines) + "\n")


# -- color-matched node localization -------------------------------------------------


def locate_node(frame: np.ndarray, color: np.ndarray, tol: float = 0.45,
                min_mass: float = 0.5) -> np.ndarray | None:
    """Sub-pixel centroid of pixels matching a node marker color."""
    dist = np.linalg.norm(frame - color, axis=-1)
    wgt = np.clip(1.0 - dist / tol, 0.0, None)
    mass = wgt.sum()
    if mass < min_mass:
        return None
    ii, jj = np.nonzero(wgt)
    w = wgt[ii, jj]
    return np.array([(ii * w).sum() / mass, (jj * w).sum() / mass])


def locate_nodes(frame: np.ndarray, n_nodes: int) -> np.ndarray:
    """(n_nodes, 2) positions with NaN rows where localization failed."""
    colors = node_colors(n_nodes)
    out = np.full((n_nodes, 2), np.nan)
    for k in range(n_nodes):
        p = locate_node(frame, colors[k])
        if p is not None:
            out[k] = p
    return out


def poke_targets(episode: Episode, pokes: list[Poke],
                 world: ChainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Poked node indices and their intended end positions."""
    owner = node_assignment(episode.node_tracks[0], world)
    nodes = np.array([owner[p.location] for p in pokes])
    if np.any(nodes < 0):
        raise ValueError("poke placed on a background pixel has no target node")
    targets = np.stack([episode.node_tracks[0][n] + np.asarray(p.shift)
                        for n, p in zip(nodes, pokes)])
    return nodes, targets


# -- diversity -------------------------------------------------------------------------


def diversity(samples: np.ndarray, projection: RandomProjection) -> tuple[float, float]:
    """Mean pairwise frame distances across realizations, both scaled by 1e4.

    samples: (S, T, H, W, C) realizations of one conditioning.
    """
    s = samples.shape[0]
    if s < 2:
        raise ValueError(f"diversity needs at least 2 samples, got {s}")
    feats = np.stack([projection.apply(samples[a]) for a in range(s)])
    mse_sum = 0.0
    feat_sum = 0.0
    pairs = 0
    for a in range(s):
        for b in range(a + 1, s):
            mse_sum += float(((samples[a] - samples[b]) ** 2).mean())
            feat_sum += float(((feats[a] - feats[b]) ** 2).mean())
            pairs += 1
    return 1e4 * mse_sum / pairs, 1e4 * feat_sum / pairs


# -- control accuracy ----------------------------------------------------------------------


@dataclass
class ControlAccuracy:
    errors: np.ndarray  # per-episode squared endpoint error (pixels^2)
    n_failed: int

    @property
    def mean(self) -> float:
        return float(self.errors.mean()) if len(self.errors) else float("nan")

    def quantiles(self, qs=(0.25, 0.5, 0.75)) -> list[float]:
        return [float(np.quantile(self.errors, q)) for q in qs] if len(self.errors) else []


def control_accuracy(model: PokeModel, store: EpisodeStore, rng: np.random.Generator,
                     episodes: int = 60, split: str = "test",
                     sampler=None) -> ControlAccuracy:
    """Squared error between the generated poked-node endpoint and its target.

    ``sampler(x0, pokes, rng) -> final frame`` defaults to one model sample;
    localization failures are excluded and counted.
    """
    world = store.world
    ids = store.ids(split)
    errors = []
    failed = 0
    if sampler is None:
        def sampler(x0, pokes, g):
            return model.sample(x0, pokes, 1, g, only_last=True)[0]
    done = 0
    for ep_id in ids:
        if done >= episodes:
            break
        ep = store.load(ep_id)
        try:
            pokes = sample_pokes(ep.flow, 1, rng)
        except ValueError:
            continue
        done += 1
        nodes, targets = poke_targets(ep, pokes, world)
        final = sampler(ep.frames[0], pokes, rng)
        est = locate_node(final, node_colors(world.n_nodes)[nodes[0]])
        if est is None:
            failed += 1
            continue
        errors.append(float(((est - targets[0]) ** 2).sum()))
    return ControlAccuracy(errors=np.asarray(errors), n_failed=failed)


# -- ambiguity curve ------------------------------------------------------------------------


def ambiguity_curve(model: PokeModel, store: EpisodeStore, rng: np.random.Generator,
                    n_pokes_list=(1, 2, 3, 4, 5), conditionings: int = 200,
                    samples: int = 50, split: str = "test") -> dict[int, tuple[float, float]]:
    """Mean poked-node error and between-sample std per poke count.

    Common random numbers across poke counts: each conditioning draws 5
    pokes once (poke sets are nested prefixes) and reuses one residual
    block for every n, so the curves differ only through the conditioning.
    """
    world = store.world
    ids = store.ids(split)
    g = model.cfg.latent_grid
    d = model.cfg.ae.latent_channels
    per_n_errors: dict[int, list[float]] = {n: [] for n in n_pokes_list}
    per_n_std: dict[int, list[float]] = {n: [] for n in n_pokes_list}
    done = 0
    idx = 0
    while done < conditionings:
        ep = store.load(ids[idx % len(ids)])
        idx += 1
        try:
            pokes5 = sample_pokes(ep.flow, max(n_pokes_list), rng)
        except ValueError:
            continue
        done += 1
        residuals = rng.standard_normal((samples, g, g, d)).astype(np.float32)
        nodes_all, targets_all = poke_targets(ep, pokes5, world)
        colors = node_colors(world.n_nodes)
        for n in n_pokes_list:
            pokes = pokes5[:n]
            finals = model.sample_from_residual(ep.frames[0], pokes, residuals,
                                                only_last=True)
            errs = []
            for s in range(samples):
                per_poke = []
                for k in range(n):
                    est = locate_node(finals[s], colors[nodes_all[k]])
                    if est is not None:
                        per_poke.append(((est - targets_all[k]) ** 2).sum())
                if per_poke:
                    errs.append(float(np.mean(per_poke)))
            if errs:
                per_n_errors[n].append(float(np.mean(errs)))
                per_n_std[n].append(float(np.std(errs)))
    return {n: (float(np.mean(per_n_errors[n])), float(np.mean(per_n_std[n])))
            for n in n_pokes_list}


# -- correlation map --------------------------------------------------------------------------


def correlation_map(model: PokeModel, episode: Episode, world: ChainConfig,
                    rng: np.random.Generator, n: int = 1000,
                    chunk: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Variance of per-node [magnitude, angle] responses to n random pokes
    at one location, painted onto each node's pixels.

    Returns (H, W) variance map and the per-node variance vector.
    """
    pokes = direction_sweep_pokes(episode, n, rng)
    x0 = episode.frames[0]
    start = episode.node_tracks[0]
    loc = np.asarray(pokes[0].location, dtype=np.float64)
    n_nodes = world.n_nodes
    # shifts are measured relative to the controlled location
    disps = np.full((n, n_nodes, 2), np.nan)
    for a in range(0, n, chunk):
        block = pokes[a:a + chunk]
        finals = _sample_per_poke_final(model, x0, block, rng)
        for i, fr in enumerate(finals):
            pos = locate_nodes(fr, n_nodes)
            disps[a + i] = pos - loc
    mags = np.linalg.norm(disps, axis=-1)
    angles = np.arctan2(disps[..., 1], disps[..., 0])
    per_node = np.zeros(n_nodes)
    for k in range(n_nodes):
        ok = np.isfinite(mags[:, k])
        if ok.sum() < 2:
            per_node[k] = np.nan
            continue
        var_mag = float(np.var(mags[ok, k]))
        # circular variance of the angle, weighted into pixel units by the
        # mean magnitude so both components live on comparable scales
        c = np.cos(angles[ok, k]).mean()
        s = np.sin(angles[ok, k]).mean()
        var_ang = (1.0 - np.hypot(c, s)) * float(np.mean(mags[ok, k]) ** 2)
        per_node[k] = var_mag + var_ang
    owner = node_assignment(start, world)
    vmap = np.zeros((world.height, world.width))
    fg = owner >= 0
    vmap[fg] = np.nan_to_num(per_node, nan=0.0)[owner[fg]]
    if not np.any(np.nan_to_num(per_node) > 1e-9):
        warnings.warn("correlation_map: generated motion is degenerate (all-zero)")
    return vmap, per_node


def _sample_per_poke_final(model: PokeModel, x0: np.ndarray, pokes: list[Poke],
                           rng: np.random.Generator) -> np.ndarray:
    """One final frame per poke (each poke is its own conditioning)."""
    from . import tensor as T
    from .objective import sample_prior
    from .tensor import Tensor

    n = len(pokes)
    h, w = x0.shape[:2]
    maps = np.stack([build_poke_map([p], h, w) for p in pokes])
    x0b = np.repeat(x0[None], n, axis=0)
    g = model.cfg.latent_grid
    r = sample_prior((n, g, g, model.cfg.ae.latent_channels), rng=rng)
    with T.no_grad():
        cond = model.encoders.encode(x0b, maps).stacked()
        z, _ = model.flow.forward(Tensor(r), cond)
        frames = model.ae.decode_sequence(z, x0b, only_last=True)
    return frames.data


# -- kinematics transfer -----------------------------------------------------------------------


def transfer_check(model: PokeModel, source: Episode, target: Episode,
                   rng: np.random.Generator) -> dict:
    """Transfer the source residual to a new frame and summarize fidelity.

    Returns the reconstructed-latent round-trip error under the source
    conditioning, the transferred poked-node endpoint error on the target
    frame, and the mean node distance between the transfer and a fresh
    prior sample under the same conditioning.
    """
    from . import tensor as T
    from .tensor import Tensor

    world_pokes = sample_pokes(source.flow, 1, rng)
    r = model.extract_residual(source.frames, world_pokes)
    with T.no_grad():
        cond = model.cond_tensor(source.frames[0][None], [world_pokes])
        z_rt, _ = model.flow.forward(Tensor(r[None]), cond)
        z_src = model.ae.encode(source.frames[None])
    latent_err = float(np.max(np.abs(z_rt.data - z_src.data)))

    transferred = model.transfer(source.frames, world_pokes, target.frames[0],
                                 only_last=True)
    fresh = model.sample(target.frames[0], world_pokes, 1, rng, only_last=True)[0]
    n_nodes = model.cfg.world.n_nodes
    pos_t = locate_nodes(transferred, n_nodes)
    pos_f = locate_nodes(fresh, n_nodes)
    ok = np.isfinite(pos_t[:, 0]) & np.isfinite(pos_f[:, 0])
    mean_node_dist = float(np.linalg.norm(pos_t[ok] - pos_f[ok], axis=1).mean()) if ok.any() else float("nan")
    return {"latent_roundtrip_err": latent_err,
            "mean_node_dist_to_fresh_sample": mean_node_dist,
            "pokes": world_pokes}
