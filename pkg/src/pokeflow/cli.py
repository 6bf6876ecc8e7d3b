"""Command-line surface for reproducible runs.

Commands: gen-data, train-ae, train-flow, sample, transfer, eval, plot.
Exit codes: 0 ok, 1 usage error, 2 data/config error, 3 numeric failure.
POKEFLOW_THREADS overrides the worker count for data generation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import serialize
from .conditioning import Poke, TrainingDiverged
from .config import ConfigError, RunConfig, load_config, substream
from .dataset import EpisodeStore, generate_dataset, write_episode
from .pipeline import PokeModel
from .tensor import NumericError
from .toyworld import ChainConfig, Episode, SimulationError, sample_pokes

log = logging.getLogger("pokeflow")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def parse_poke(token: str) -> Poke:
    """Parse one 'dy,dx@row,col' token."""
    try:
        shift_s, loc_s = token.split("@")
        dy, dx = (float(v) for v in shift_s.split(","))
        row, col = (int(v) for v in loc_s.split(","))
    except (ValueError, AttributeError) as e:
        raise UsageError(f"bad poke token {token!r}, expected 'dy,dx@row,col'") from e
    return Poke(shift=(dy, dx), location=(row, col))


def format_poke(p: Poke) -> str:
    return f"{p.shift[0]:g},{p.shift[1]:g}@{p.location[0]},{p.location[1]}"


def _world_config(cfg: RunConfig) -> ChainConfig:
    w = cfg.world
    return ChainConfig(n_nodes=w.n_nodes, link_length=w.link_length, root=tuple(w.root),
                       stiffness=w.stiffness, damping=w.damping, noise_scale=w.noise_scale,
                       height=w.height, width=w.width, frames=w.frames,
                       thickness=w.thickness, node_radius=w.node_radius,
                       init_spread=w.init_spread, substeps=w.substeps, dt=w.dt)


def _check_pokes(pokes: list[Poke], cfg: RunConfig) -> list[Poke]:
    if not 1 <= len(pokes) <= 5:
        raise DataError(f"{len(pokes)} pokes given; the training protocol allows 1..5")
    h, w = cfg.world.height, cfg.world.width
    for p in pokes:
        if not (0 <= p.location[0] < h and 0 <= p.location[1] < w):
            raise DataError(f"poke location {p.location} outside the {h}x{w} frame")
    return pokes


def _provenance(cfg: RunConfig, ckpts: dict[str, Path] | None = None,
                seed: int | None = None) -> dict:
    prov = {"config_hash": cfg.hash(),
            "seed": cfg.master_seed if seed is None else seed}
    for name, path in (ckpts or {}).items():
        prov[f"{name}_checkpoint_hash"] = serialize.file_hash(path)
    return prov


def _load_model(cfg: RunConfig, run_dir: Path) -> tuple[PokeModel, dict]:
    model = PokeModel(cfg)
    for part in ("ae", "encoders", "flow"):
        if not (run_dir / f"{part}.pkfw").exists():
            raise DataError(f"missing checkpoint {run_dir / (part + '.pkfw')}")
    model.load_all(run_dir)
    ckpts = {p: run_dir / f"{p}.pkfw" for p in ("ae", "encoders", "flow")}
    return model, _provenance(cfg, ckpts)


def _save_frames_png(frames: np.ndarray, out_dir: Path, stem: str) -> None:
    from PIL import Image
    for t in range(frames.shape[0]):
        arr = np.clip(frames[t] * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out_dir / f"{stem}_f{t:02d}.png")


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> None:
    world = _world_config(cfg)
    episodes = args.episodes or cfg.world.episodes
    workers = args.workers or int(os.environ.get("POKEFLOW_THREADS", "1"))
    manifest = generate_dataset(world, episodes, cfg.master_seed, args.out,
                                cfg.world.test_fraction, cfg.world.force_prob,
                                cfg.world.force_scale)
    del workers  # generation is fast serially at desk scale; knob reserved
    prov = _provenance(cfg)
    prov["dataset_hash"] = manifest["config_hash"]
    (Path(args.out) / "provenance.json").write_text(json.dumps(prov, sort_keys=True))
    print(f"wrote {episodes} episodes to {args.out} "
          f"(dataset hash {manifest['config_hash']})")


def cmd_train_ae(args, cfg: RunConfig) -> None:
    from .train import train_ae
    store = EpisodeStore(args.data)
    model = PokeModel(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    ckpt = train_ae(model, store, out, steps=args.steps)
    prov = _provenance(cfg, {"ae": ckpt})
    (out / "ae_provenance.json").write_text(json.dumps(prov, sort_keys=True))
    print(f"AE checkpoint at {ckpt}")


def cmd_train_flow(args, cfg: RunConfig) -> None:
    from .train import pretrain_encoders, train_flow
    store = EpisodeStore(args.data)
    model = PokeModel(cfg)
    ae_path = Path(args.ae) if args.ae else Path(args.out) / "ae.pkfw"
    if not ae_path.exists():
        raise DataError(f"flow training requires a finished AE checkpoint at {ae_path}")
    model.load_ae(ae_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    enc_path = out / "encoders.pkfw"
    if enc_path.exists() and not args.retrain_encoders:
        model.load_encoders(enc_path)
    else:
        pretrain_encoders(model, store, out, steps=args.encoder_steps)
    ckpt = train_flow(model, store, out, steps=args.steps)
    prov = _provenance(cfg, {"ae": ae_path, "encoders": enc_path, "flow": ckpt})
    (out / "flow_provenance.json").write_text(json.dumps(prov, sort_keys=True))
    print(f"flow checkpoint at {ckpt}")


def cmd_sample(args, cfg: RunConfig) -> None:
    pokes = _check_pokes([parse_poke(t) for t in args.poke], cfg) if args.poke else None
    store = EpisodeStore(args.data)
    model, prov = _load_model(cfg, Path(args.run))
    ep = store.load(args.episode)
    if pokes is None:
        pokes = sample_pokes(ep.flow, 1, substream(args.seed, "cli-pokes"))
    rng = substream(args.seed, "cli-sample")
    frames = model.sample(ep.frames[0], pokes, args.samples, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = _world_config(cfg)
    for s in range(args.samples):
        fake = Episode(frames=frames[s], node_tracks=np.zeros((world.frames, world.n_nodes, 2)),
                       flow=np.zeros((world.height, world.width, 2), np.float32),
                       seed=args.seed)
        write_episode(out / f"sample{s:02d}.bin", fake, cfg.hash())
        _save_frames_png(frames[s], out, f"sample{s:02d}")
    prov["seed"] = args.seed
    prov["pokes"] = [format_poke(p) for p in pokes]
    (out / "provenance.json").write_text(json.dumps(prov, sort_keys=True))
    print(f"wrote {args.samples} samples to {out}")


def cmd_transfer(args, cfg: RunConfig) -> None:
    pokes = _check_pokes([parse_poke(t) for t in args.poke], cfg) if args.poke else None
    store = EpisodeStore(args.data)
    model, prov = _load_model(cfg, Path(args.run))
    source = store.load(args.source)
    target = store.load(args.target)
    if pokes is None:
        pokes = sample_pokes(source.flow, 1, substream(args.seed, "cli-pokes"))
    frames = model.transfer(source.frames, pokes, target.frames[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = _world_config(cfg)
    fake = Episode(frames=frames, node_tracks=np.zeros((world.frames, world.n_nodes, 2)),
                   flow=np.zeros((world.height, world.width, 2), np.float32), seed=args.seed)
    write_episode(out / "transfer.bin", fake, cfg.hash())
    _save_frames_png(frames, out, "transfer")
    prov["seed"] = args.seed
    prov["pokes"] = [format_poke(p) for p in pokes]
    (out / "provenance.json").write_text(json.dumps(prov, sort_keys=True))
    print(f"wrote transfer to {out}")


def cmd_eval(args, cfg: RunConfig) -> None:
    from . import evalsuite as ev
    store = EpisodeStore(args.data)
    model, prov = _load_model(cfg, Path(args.run))
    rng = substream(args.seed, f"eval-{args.metric}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts: dict = {}
    tables: dict = {}
    if args.metric == "control":
        acc = ev.control_accuracy(model, store, rng, episodes=cfg.eval.control_episodes)
        values = {"mean_sq_err": acc.mean, "quantiles_25_50_75": acc.quantiles(),
                  "n_failed": acc.n_failed,
                  "baseline_mean_sq_poke": store.stats["mean_sq_poke_mag"]}
        counts = {"episodes": int(len(acc.errors))}
        tables["errors"] = acc.errors[:, None] if len(acc.errors) else np.zeros((0, 1))
    elif args.metric == "diversity":
        ep = store.load(store.ids("test")[0])
        pokes = sample_pokes(ep.flow, 1, rng)
        samples = model.sample(ep.frames[0], pokes, cfg.eval.samples_per_cond, rng)
        dmse, dfeat = ev.diversity(samples, model.projection)
        values = {"div_mse_x1e4": dmse, "div_feat_x1e4": dfeat}
        counts = {"samples": cfg.eval.samples_per_cond}
    elif args.metric == "ambiguity":
        curve = ev.ambiguity_curve(model, store, rng,
                                   conditionings=cfg.eval.ambiguity_conditionings,
                                   samples=cfg.eval.ambiguity_samples)
        values = {str(n): {"mean_err": m, "std50": s} for n, (m, s) in curve.items()}
        counts = {"conditionings": cfg.eval.ambiguity_conditionings,
                  "samples_per_conditioning": cfg.eval.ambiguity_samples}
        tables["curve"] = np.array([[n, m, s] for n, (m, s) in sorted(curve.items())])
    elif args.metric == "correlation":
        ep = store.load(args.episode or store.ids("test")[0])
        vmap, per_node = ev.correlation_map(model, ep, store.world, rng,
                                            n=cfg.eval.correlation_pokes)
        values = {"per_node_variance": [None if np.isnan(v) else float(v) for v in per_node]}
        counts = {"pokes": cfg.eval.correlation_pokes}
        tables["map"] = vmap
    else:
        raise UsageError(f"unknown eval metric {args.metric!r}")
    report = ev.EvalReport(metric=args.metric, values=values, sample_counts=counts,
                           config_hash=cfg.hash(), seed=args.seed)
    report.values["provenance"] = prov
    ev.write_report(report, out, tables)
    print(f"wrote {args.metric} report to {out}")


def cmd_plot(args, cfg: RunConfig | None) -> None:
    report_path = Path(args.report)
    if not report_path.exists():
        raise DataError(f"no report at {report_path}")
    report = json.loads(report_path.read_text())
    out = Path(args.out or report_path.parent)
    out.mkdir(parents=True, exist_ok=True)
    metric = report.get("metric")
    if metric == "ambiguity":
        rows = ["\t".join(["n_pokes", "mean_err", "std50"])]
        for n, rec in sorted((int(k), v) for k, v in report["values"].items()
                             if k.isdigit()):
            rows.append(f"{n}\t{rec['mean_err']:.6g}\t{rec['std50']:.6g}")
        (out / "ambiguity_plot.tsv").write_text("\n".join(rows) + "\n")
    elif metric == "correlation":
        map_path = report_path.parent / "correlation_map.tsv"
        if not map_path.exists():
            raise DataError(f"no correlation map table next to {report_path}")
        vmap = np.loadtxt(map_path)
        from PIL import Image
        top = vmap.max() or 1.0
        gray = np.clip(vmap / top * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(gray, mode="L").save(out / "correlation_map.png")
    elif metric == "control":
        errs = report["values"].get("quantiles_25_50_75", [])
        rows = ["\t".join(["quantile", "sq_err"])] + \
               [f"{q}\t{v:.6g}" for q, v in zip((0.25, 0.5, 0.75), errs)]
        (out / "control_plot.tsv").write_text("\n".join(rows) + "\n")
    else:
        raise DataError(f"plot: unsupported metric {metric!r}")
    print(f"wrote plot data to {out}")


# -- entry point ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pokeflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, run=False):
        sp.add_argument("--config", help="JSON config file (defaults apply if omitted)")
        sp.add_argument("--seed", type=int, default=None,
                        help="command seed (defaults to the config master seed)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if run:
            sp.add_argument("--run", required=True, help="directory with checkpoints")

    g = sub.add_parser("gen-data", help="simulate and write the toy dataset")
    common(g, data=False)
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, default=None)
    g.add_argument("--workers", type=int, default=None)

    t = sub.add_parser("train-ae", help="train the sequence autoencoder")
    common(t)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)

    f = sub.add_parser("train-flow", help="pretrain condition encoders, then the flow")
    common(f)
    f.add_argument("--out", required=True)
    f.add_argument("--ae", default=None, help="AE checkpoint (default: <out>/ae.pkfw)")
    f.add_argument("--steps", type=int, default=None)
    f.add_argument("--encoder-steps", type=int, default=None)
    f.add_argument("--retrain-encoders", action="store_true")

    s = sub.add_parser("sample", help="sample futures for one conditioning")
    common(s, run=True)
    s.add_argument("--episode", required=True, help="episode id providing x0")
    s.add_argument("--poke", action="append", default=[],
                   help="poke token dy,dx@row,col (repeatable, up to 5)")
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--out", required=True)

    tr = sub.add_parser("transfer", help="transfer source kinematics to a target frame")
    common(tr, run=True)
    tr.add_argument("--source", required=True)
    tr.add_argument("--target", required=True)
    tr.add_argument("--poke", action="append", default=[])
    tr.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="run one evaluation metric")
    common(e, run=True)
    e.add_argument("--metric", required=True,
                   choices=["control", "diversity", "ambiguity", "correlation"])
    e.add_argument("--episode", default=None)
    e.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="emit plot-data files from a report")
    pl.add_argument("--report", required=True)
    pl.add_argument("--out", default=None)
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-flow": cmd_train_flow,
    "sample": cmd_sample,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("POKEFLOW_LOGLEVEL", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("POKEFLOW_THREADS")
    if threads:
        os.environ.setdefault("OMP_NUM_THREADS", threads)
        os.environ.setdefault("OPENBLAS_NUM_THREADS", threads)
    try:
        args = build_parser().parse_args(argv)
        cfg = None
        if getattr(args, "config", None):
            cfg = load_config(args.config)
        elif args.command != "plot":
            cfg = RunConfig()
        if getattr(args, "seed", None) is None and cfg is not None:
            args.seed = cfg.master_seed
        _COMMANDS[args.command](args, cfg)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericError, TrainingDiverged, SimulationError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
