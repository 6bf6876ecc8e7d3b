"""Episode files and dataset manifests.

An episode file is one little-endian binary record:

    magic     4 bytes  b"PKEP"
    version   uint16
    seed      uint64
    hash_len  uint16, then hash_len bytes (config hash, UTF-8 hex)
    arrays    frames (f4), node_tracks (f8), flow (f4), each as
              dtype code uint8 (0=f4, 1=f8), rank uint8, extents uint32*rank, raw values

The manifest is a JSON file listing episode ids, per-episode seeds,
train/test split tags and dataset statistics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .toyworld import ChainConfig, Episode, eligible_mask, simulate_chain

EP_MAGIC = b"PKEP"
EP_VERSION = 1
_DT = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DT_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _DT_CODE[arr.dtype.newbyteorder("<")]
    head = struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(_DT[code]).tobytes()


def _unpack_array(buf: bytes, pos: int) -> tuple[np.ndarray, int]:
    code, rank = struct.unpack_from("<BB", buf, pos)
    pos += 2
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _DT[code]
    n = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).copy()
    return arr, pos + n * dt.itemsize


def write_episode(path, ep: Episode, config_hash: str) -> None:
    hb = config_hash.encode()
    out = EP_MAGIC + struct.pack("<HQ", EP_VERSION, ep.seed)
    out += struct.pack("<H", len(hb)) + hb
    out += _pack_array(ep.frames.astype(np.float32))
    out += _pack_array(ep.node_tracks.astype(np.float64))
    out += _pack_array(ep.flow.astype(np.float32))
    Path(path).write_bytes(out)


def read_episode(path) -> tuple[Episode, str]:
    buf = Path(path).read_bytes()
    if buf[:4] != EP_MAGIC:
        raise ValueError(f"{path}: not an episode file")
    version, seed = struct.unpack_from("<HQ", buf, 4)
    if version != EP_VERSION:
        raise ValueError(f"{path}: unsupported episode version {version}")
    pos = 14
    (hash_len,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    config_hash = buf[pos:pos + hash_len].decode()
    pos += hash_len
    frames, pos = _unpack_array(buf, pos)
    tracks, pos = _unpack_array(buf, pos)
    flow, pos = _unpack_array(buf, pos)
    return Episode(frames=frames, node_tracks=tracks, flow=flow, seed=int(seed)), config_hash


def episode_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def generate_dataset(cfg: ChainConfig, n_episodes: int, master_seed: int, out_dir,
                     test_fraction: float = 0.2, force_prob: float = 0.7,
                     force_scale: float = 3.0) -> dict:
    """Simulate episodes, write files plus manifest, return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash_of(cfg, master_seed, n_episodes, test_fraction,
                              force_prob, force_scale)
    episodes = []
    sum_sq_poke = 0.0
    sum_mag = 0.0
    n_train = n_episodes - int(round(n_episodes * test_fraction))
    for i in range(n_episodes):
        seed = episode_seed(master_seed, i)
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, i, 1]))
        force = None
        if rng.random() < force_prob:
            node = int(rng.integers(1, cfg.n_nodes))
            ang = rng.uniform(0, 2 * np.pi)
            force = (node, (float(force_scale * np.cos(ang)),
                            float(force_scale * np.sin(ang))))
        ep = simulate_chain(cfg, seed, poke_force=force)
        name = f"ep{i:05d}.bin"
        write_episode(out / name, ep, cfg_hash)
        mag = np.linalg.norm(ep.flow, axis=-1)
        elig = eligible_mask(ep.flow)
        if np.any(elig):
            sum_sq_poke += float((mag[elig] ** 2).mean())
        sum_mag += float(mag[mag > 0].mean()) if np.any(mag > 0) else 0.0
        episodes.append({"id": f"ep{i:05d}", "seed": seed, "file": name,
                         "split": "train" if i < n_train else "test"})
    manifest = {
        "config_hash": cfg_hash,
        "master_seed": master_seed,
        "world": vars(cfg).copy(),
        "episodes": episodes,
        "stats": {
            "mean_sq_poke_mag": sum_sq_poke / n_episodes,
            "mean_flow_mag": sum_mag / n_episodes,
        },
    }
    manifest["world"]["root"] = list(cfg.root)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def config_hash_of(cfg: ChainConfig, *extra) -> str:
    blob = json.dumps([vars(cfg), [repr(e) for e in extra]], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class EpisodeStore:
    """Loads a generated dataset directory lazily with an episode cache."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = json.loads((self.root / "manifest.json").read_text())
        self._cache: dict[str, Episode] = {}
        w = dict(self.manifest["world"])
        w["root"] = tuple(w["root"])
        self.world = ChainConfig(**w)

    def ids(self, split: str | None = None) -> list[str]:
        return [e["id"] for e in self.manifest["episodes"]
                if split is None or e["split"] == split]

    def load(self, ep_id: str) -> Episode:
        if ep_id not in self._cache:
            rec = next(e for e in self.manifest["episodes"] if e["id"] == ep_id)
            ep, _ = read_episode(self.root / rec["file"])
            self._cache[ep_id] = ep
        return self._cache[ep_id]

    @property
    def stats(self) -> dict:
        return self.manifest["stats"]
