"""Run configuration: nested sections, strict parsing, hashing, seed streams.

Configs are plain JSON with full defaulting; any unknown key is a hard
error so that a config hash always pins the exact run semantics.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class WorldSection:
    n_nodes: int = 5
    link_length: float = 5.0
    root: list = field(default_factory=lambda: [8.0, 16.0])
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
    episodes: int = 400
    test_fraction: float = 0.2
    force_prob: float = 0.7
    force_scale: float = 3.0


@dataclass
class AESection:
    latent_channels: int = 16
    enc_widths: list = field(default_factory=lambda: [32, 48])
    dec_widths: list = field(default_factory=lambda: [32, 24, 16])
    steps: int = 1500
    batch: int = 16
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    weight_decay: float = 1e-5
    lr_decay: float = 0.9995
    lambda_f: float = 1.0
    proj_dim: int = 128
    proj_patch: int = 8
    ckpt_every: int = 200


@dataclass
class EncoderSection:
    d_x: int = 8
    d_c: int = 8
    widths: list = field(default_factory=lambda: [16, 32])
    steps: int = 1200
    batch: int = 16
    lr: float = 1e-3


@dataclass
class FlowSection:
    blocks: int = 3
    sub_blocks: list = field(default_factory=lambda: [2, 2, 1])
    hidden: int = 16
    clamp: float = 2.5
    steps: int = 4000
    batch: int = 16
    lr: float = 1e-3
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    ckpt_every: int = 500


@dataclass
class EvalSection:
    samples_per_cond: int = 5
    control_episodes: int = 60
    ambiguity_conditionings: int = 200
    ambiguity_samples: int = 50
    correlation_pokes: int = 1000
    independence_samples: int = 10000


@dataclass
class RunConfig:
    master_seed: int = 1234
    out_dir: str = "runs/default"
    world: WorldSection = field(default_factory=WorldSection)
    ae: AESection = field(default_factory=AESection)
    encoders: EncoderSection = field(default_factory=EncoderSection)
    flow: FlowSection = field(default_factory=FlowSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def latent_grid(self) -> int:
        return self.world.height // 8


_SECTIONS = {"world": WorldSection, "ae": AESection, "encoders": EncoderSection,
             "flow": FlowSection, "eval": EvalSection}


def _fill(cls, data: dict, path: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under '{path}'")
    return cls(**data)


def from_dict(data: dict) -> RunConfig:
    data = dict(data)
    top_allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level config key(s) {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = data.pop(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"config section '{name}' must be an object")
        sections[name] = _fill(cls, raw, name)
    cfg = RunConfig(**data, **sections)
    if cfg.world.height != cfg.world.width or cfg.world.height % 8:
        raise ConfigError("world.height/width must be equal and divisible by 8")
    if len(cfg.flow.sub_blocks) != cfg.flow.blocks:
        raise ConfigError("flow.sub_blocks length must equal flow.blocks")
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(data)


def substream(master_seed: int, name: str) -> np.random.Generator:
    """Named deterministic child stream of the master seed."""
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, zlib.crc32(name.encode())]))


def substream_seed(master_seed: int, name: str) -> int:
    return int(np.random.SeedSequence(
        [master_seed, zlib.crc32(name.encode())]).generate_state(1)[0])
