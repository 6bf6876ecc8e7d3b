"""Synthetic articulated-chain world with analytic dense flow fields.

A damped, torque-driven kinematic chain hangs from a fixed root. Links
are rigid by construction (positions derive from joint angles), frames
render anti-aliased colored capsules per link with small marker discs at
the nodes, and the dense flow field between the first and last frame is
exact: every foreground pixel is assigned to a node and inherits that
node's displacement. Pokes are sampled from the flow field the way the
training protocol prescribes.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .conditioning import Poke


@dataclass
class ChainConfig:
    n_nodes: int = 5
    link_length: float = 5.0
    root: tuple[float, float] = (8.0, 16.0)  # (row, col)
    stiffness: float = 14.0
    damping: float = 2.2
    noise_scale: float = 2.5
    height: int = 32
    width: int = 32
    frames: int = 10
    thickness: float = 1.4
    node_radius: float = 1.1
    init_spread: float = 0.55
    substeps: int = 8
    dt: float = 0.05


@dataclass
class Episode:
    frames: np.ndarray       # (T, H, W, 3) float32 in [0, 1]
    node_tracks: np.ndarray  # (T, n_nodes, 2) float64, (row, col)
    flow: np.ndarray         # (H, W, 2) float32, (drow, dcol)
    seed: int
    poke_force: tuple[int, tuple[float, float]] | None = None

    @property
    def x0(self) -> np.ndarray:
        return self.frames[0]


class SimulationError(RuntimeError):
    pass


def link_colors(n_links: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(i / n_links, 1.0, 0.55) for i in range(n_links)]
    return np.asarray(cols, dtype=np.float32)


def node_colors(n_nodes: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb((i + 0.5) / n_nodes, 1.0, 1.0) for i in range(n_nodes)]
    return np.asarray(cols, dtype=np.float32)


def _angles_to_nodes(angles: np.ndarray, cfg: ChainConfig) -> np.ndarray:
    """Joint angles -> node positions; angle 0 points straight down (+row)."""
    n = len(angles) + 1
    pos = np.zeros((n, 2))
    pos[0] = cfg.root
    for i, a in enumerate(angles):
        step = cfg.link_length * np.array([np.cos(a), np.sin(a)])
        pos[i + 1] = pos[i] + step
    return pos


def _segment_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab) or 1.0
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def render_frame(nodes: np.ndarray, cfg: ChainConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    ii, jj = np.mgrid[0:h, 0:w]
    pts = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1).astype(np.float64)
    img = np.zeros((h * w, 3), dtype=np.float32)
    lc = link_colors(len(nodes) - 1)
    for i in range(len(nodes) - 1):
        d = _segment_dist(pts, nodes[i], nodes[i + 1])
        alpha = np.clip(cfg.thickness + 0.5 - d, 0.0, 1.0).astype(np.float32)[:, None]
        img = img * (1 - alpha) + lc[i] * alpha
    nc = node_colors(len(nodes))
    for i, p in enumerate(nodes):
        d = np.linalg.norm(pts - p, axis=1)
        alpha = np.clip(cfg.node_radius + 0.5 - d, 0.0, 1.0).astype(np.float32)[:, None]
        img = img * (1 - alpha) + nc[i] * alpha
    return img.reshape(h, w, 3)


def node_assignment(nodes: np.ndarray, cfg: ChainConfig) -> np.ndarray:
    """(H, W) map: index of the node owning each pixel, -1 for background.

    A pixel belongs to the nearest rendered feature: a node disc maps to
    that node, a link capsule to the link's distal node.
    """
    h, w = cfg.height, cfg.width
    ii, jj = np.mgrid[0:h, 0:w]
    pts = np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1).astype(np.float64)
    best = np.full(h * w, np.inf)
    owner = np.full(h * w, -1, dtype=np.int64)
    for i in range(len(nodes) - 1):
        d = _segment_dist(pts, nodes[i], nodes[i + 1])
        hit = (d <= cfg.thickness + 0.5) & (d < best)
        best[hit] = d[hit]
        owner[hit] = i + 1
    for i, p in enumerate(nodes):
        d = np.linalg.norm(pts - p, axis=1)
        hit = (d <= cfg.node_radius + 0.5) & (d < best)
        best[hit] = d[hit]
        owner[hit] = i
    return owner.reshape(h, w)


def flow_field(track0: np.ndarray, trackT: np.ndarray, cfg: ChainConfig) -> np.ndarray:
    owner = node_assignment(track0, cfg)
    disp = trackT - track0  # (n_nodes, 2)
    flow = np.zeros((cfg.height, cfg.width, 2), dtype=np.float32)
    fg = owner >= 0
    flow[fg] = disp[owner[fg]]
    return flow


def simulate_chain(cfg: ChainConfig, seed: int,
                   poke_force: tuple[int, tuple[float, float]] | None = None) -> Episode:
    """Roll the chain for cfg.frames steps; deterministic for a given seed.

    ``poke_force`` is an optional (node index, (f_row, f_col)) external
    force applied at one node for the whole episode.
    """
    rng = np.random.default_rng(seed)
    n_links = cfg.n_nodes - 1
    # the sampled initial pose is also the rest pose: motion then comes from
    # noise torques and the optional poke force, not from spring relaxation
    rest = rng.uniform(-cfg.init_spread, cfg.init_spread, size=n_links)
    angles = rest.copy()
    omega = np.zeros(n_links)
    tracks = np.zeros((cfg.frames, cfg.n_nodes, 2))
    tracks[0] = _angles_to_nodes(angles, cfg)
    dt = cfg.dt / cfg.substeps
    for t in range(1, cfg.frames):
        noise = rng.normal(scale=cfg.noise_scale, size=n_links)
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(cfg.substeps):
                torque = -cfg.stiffness * (angles - rest) - cfg.damping * omega + noise
                if poke_force is not None:
                    # generalized force: moving joint i translates every node
                    # past it along the link-i normal, tau_i = f . dp_j/dtheta_i
                    j, f = poke_force
                    for i in range(min(j, n_links)):
                        torque[i] += cfg.link_length * (
                            -np.sin(angles[i]) * f[0] + np.cos(angles[i]) * f[1])
                omega = omega + dt * torque
                angles = angles + dt * omega
        if not np.all(np.isfinite(angles)):
            raise SimulationError(f"chain simulation blew up (seed {seed})")
        tracks[t] = _angles_to_nodes(angles, cfg)
        if np.max(np.abs(tracks[t])) > 10 * max(cfg.height, cfg.width):
            raise SimulationError(f"chain left the world (seed {seed})")
    frames = np.stack([render_frame(tracks[t], cfg) for t in range(cfg.frames)])
    flow = flow_field(tracks[0], tracks[-1], cfg)
    return Episode(frames=frames.astype(np.float32), node_tracks=tracks,
                   flow=flow, seed=seed, poke_force=poke_force)


# -- poke sampling ----------------------------------------------------------------


def _magnitudes(flow: np.ndarray) -> np.ndarray:
    return np.linalg.norm(flow, axis=-1)


def eligible_mask(flow: np.ndarray) -> np.ndarray:
    """Pixels whose motion exceeds the mean magnitude of the moving support."""
    mag = _magnitudes(flow)
    moving = mag > 0
    if not np.any(moving):
        return np.zeros_like(moving)
    return mag > mag[moving].mean()

def sample_pokes(flow: np.ndarray, n_pokes: int, rng: np.random.Generator) -> list[Poke]:
    """Draw pokes uniformly among sufficiently-moving pixels; shift = flow there."""
    if not 1 <= n_pokes <= 5:
        raise ValueError(f"n_pokes must be in [1, 5], got {n_pokes}")
    mask = eligible_mask(flow)
    idx = np.argwhere(mask)
    if len(idx) < n_pokes:
        raise ValueError(
            f"only {len(idx)} pixels exceed mean motion; cannot place {n_pokes} pokes")
    chosen = idx[rng.choice(len(idx), size=n_pokes, replace=False)]
    return [Poke(shift=(float(flow[i, j, 0]), float(flow[i, j, 1])), location=(int(i), int(j)))
            for i, j in chosen]


def background_poke(episode: Episode, rng: np.random.Generator) -> tuple[list[Poke], np.ndarray]:
    """A poke on a static pixel; the target is x0 repeated T times."""
    mag = _magnitudes(episode.flow)
    bg = np.argwhere(mag == 0)
    fg = np.argwhere(mag > 0)
    if len(bg) == 0 or len(fg) == 0:
        raise ValueError("background poke needs both static and moving pixels")
    loc = bg[rng.integers(len(bg))]
    m = mag[tuple(fg[rng.integers(len(fg))])]
    src = episode.flow[tuple(fg[rng.integers(len(fg))])]
    ang = np.arctan2(src[1], src[0])
    poke = Poke(shift=(float(m * np.cos(ang)), float(m * np.sin(ang))),
                location=(int(loc[0]), int(loc[1])))
    target = np.repeat(episode.frames[0][None], episode.frames.shape[0], axis=0)
    return [poke], target


def direction_sweep_pokes(episode: Episode, count: int,
                          rng: np.random.Generator) -> list[Poke]:
    """``count`` pokes at one fixed (sampled) location with resampled shifts:
    directions uniform on the circle, magnitudes uniform between the mean
    and max moving-pixel magnitude."""
    mag = _magnitudes(episode.flow)
    if mag.max() == 0:
        raise ValueError("direction sweep needs a moving episode")
    base = sample_pokes(episode.flow, 1, rng)[0]
    lo = mag[mag > 0].mean()
    hi = mag.max()
    angles = rng.uniform(0.0, 2 * np.pi, size=count)
    mags = rng.uniform(lo, hi, size=count)
    return [Poke(shift=(float(m * np.cos(a)), float(m * np.sin(a))), location=base.location)
            for m, a in zip(mags, angles)]
