import json

import numpy as np
import pytest

from pokeflow import evalsuite as ev
from pokeflow.config import from_dict
from pokeflow.dataset import generate_dataset, EpisodeStore
from pokeflow.features import RandomProjection
from pokeflow.pipeline import PokeModel
from pokeflow.tensor import Tensor
from pokeflow.toyworld import ChainConfig, node_colors, render_frame, simulate_chain


@pytest.fixture(scope="module")
def tiny_store(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    generate_dataset(ChainConfig(), 8, 21, root, test_fraction=0.5)
    return EpisodeStore(root)


# -- localization ----------------------------------------------------------------


def test_locate_nodes_on_rendered_frame_subpixel():
    cfg = ChainConfig()
    ep = simulate_chain(cfg, 3)
    pos = ev.locate_nodes(ep.frames[0], cfg.n_nodes)
    err = np.linalg.norm(pos - ep.node_tracks[0], axis=1)
    assert np.all(np.isfinite(err))
    assert err.max() < 1.0


def test_locate_node_fails_cleanly_on_absent_color():
    frame = np.zeros((32, 32, 3), np.float32)
    assert ev.locate_node(frame, node_colors(5)[0]) is None


# -- diversity ------------------------------------------------------------------------


def test_diversity_identical_samples_zero():
    proj = RandomProjection(seed=0)
    s = np.random.default_rng(0).random((4, 3, 16, 16, 3)).astype(np.float32)
    samples = np.repeat(s[:1], 4, axis=0)
    dmse, dfeat = ev.diversity(samples, proj)
    assert dmse == 0.0 and dfeat == 0.0


def test_diversity_uniform_offset_hand_value():
    proj = RandomProjection(seed=0)
    base = np.full((1, 2, 16, 16, 3), 0.3, np.float32)
    samples = np.concatenate([base, base + 0.01], axis=0)
    dmse, _ = ev.diversity(samples, proj)
    np.testing.assert_allclose(dmse, 1.0, rtol=1e-4)


def test_diversity_permutation_invariant():
    proj = RandomProjection(seed=1)
    s = np.random.default_rng(2).random((5, 2, 16, 16, 3)).astype(np.float32)
    a = ev.diversity(s, proj)
    b = ev.diversity(s[::-1].copy(), proj)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_diversity_needs_two_samples():
    with pytest.raises(ValueError, match="at least 2"):
        ev.diversity(np.zeros((1, 2, 8, 8, 3)), RandomProjection())


# -- control accuracy -------------------------------------------------------------------


def test_control_accuracy_oracle_on_oracle(tiny_store):
    # feeding back the ground-truth final frame leaves only localization noise
    model = PokeModel(from_dict({}))
    holder = {}

    def perfect(x0, pokes, rng):
        return holder["ep"].frames[-1]

    acc_errors = []
    world = tiny_store.world
    rng = np.random.default_rng(0)
    for ep_id in tiny_store.ids("test"):
        ep = tiny_store.load(ep_id)
        holder["ep"] = ep
        from pokeflow.toyworld import sample_pokes
        pokes = sample_pokes(ep.flow, 1, rng)
        nodes, targets = ev.poke_targets(ep, pokes, world)
        est = ev.locate_node(ep.frames[-1], node_colors(world.n_nodes)[nodes[0]])
        acc_errors.append(float(((est - targets[0]) ** 2).sum()))
    assert np.sqrt(np.mean(acc_errors)) < 1.0


def test_control_accuracy_still_sampler_matches_poke_magnitude(tiny_store):
    model = PokeModel(from_dict({}))
    rng = np.random.default_rng(1)

    def still(x0, pokes, g):
        return x0

    acc = ev.control_accuracy(model, tiny_store, rng, episodes=4, sampler=still)
    assert acc.n_failed == 0
    # no generated motion: error per episode is roughly the squared poke shift
    assert acc.mean > 0.25 * tiny_store.stats["mean_sq_poke_mag"]


def test_control_accuracy_counts_localization_failures(tiny_store):
    model = PokeModel(from_dict({}))
    rng = np.random.default_rng(2)

    def black(x0, pokes, g):
        return np.zeros_like(x0)

    acc = ev.control_accuracy(model, tiny_store, rng, episodes=3, sampler=black)
    assert acc.n_failed == 3
    assert len(acc.errors) == 0


# -- ambiguity ---------------------------------------------------------------------------


class _DeterministicModel:
    """Ignores residuals entirely; plays back one fixed frame."""

    def __init__(self, cfg, frame):
        self.cfg = cfg
        self.frame = frame

    def sample_from_residual(self, x0, pokes, r, only_last=False):
        return np.repeat(self.frame[None], r.shape[0], axis=0)


def test_ambiguity_deterministic_model_zero_std(tiny_store):
    cfg = from_dict({})
    ep = tiny_store.load(tiny_store.ids("test")[0])
    model = _DeterministicModel(cfg, ep.frames[-1])
    rng = np.random.default_rng(3)
    curve = ev.ambiguity_curve(model, tiny_store, rng, n_pokes_list=(1, 3, 5),
                               conditionings=3, samples=6)
    for n, (mean_err, std50) in curve.items():
        assert std50 == 0.0
        assert np.isfinite(mean_err)


# -- correlation map -------------------------------------------------------------------------


def test_correlation_map_deterministic_responder_zero(tiny_store, monkeypatch):
    cfg = from_dict({})
    model = PokeModel(cfg)
    ep = tiny_store.load(tiny_store.ids("test")[0])

    def playback(model_, x0, pokes, rng):
        return np.repeat(ep.frames[0][None], len(pokes), axis=0)

    monkeypatch.setattr(ev, "_sample_per_poke_final", playback)
    with pytest.warns(UserWarning, match="degenerate"):
        vmap, per_node = ev.correlation_map(model, ep, tiny_store.world,
                                            np.random.default_rng(4), n=40)
    np.testing.assert_allclose(np.nan_to_num(per_node), 0.0, atol=1e-9)
    np.testing.assert_allclose(vmap, 0.0, atol=1e-9)


# -- residual round trip through the pipeline ----------------------------------------------


def test_extract_residual_roundtrips_latent(tiny_store):
    cfg = from_dict({})
    model = PokeModel(cfg)
    rng = np.random.default_rng(5)
    for name, p in model.flow.params().items():
        if name.endswith("scale"):
            p.data[...] = np.exp(rng.normal(scale=0.1, size=p.data.shape))
        else:
            p.data[...] += rng.normal(scale=0.02, size=p.data.shape)
    model.flow.mark_initialized()
    ep = tiny_store.load(tiny_store.ids("test")[0])
    from pokeflow.toyworld import sample_pokes
    pokes = sample_pokes(ep.flow, 2, rng)
    r = model.extract_residual(ep.frames, pokes)
    from pokeflow import tensor as T
    with T.no_grad():
        cond = model.cond_tensor(ep.frames[0][None], [pokes])
        z_rt, _ = model.flow.forward(Tensor(r[None]), cond)
        z_src = model.ae.encode(ep.frames[None])
    assert np.max(np.abs(z_rt.data - z_src.data)) < 1e-4


# -- report emission ---------------------------------------------------------------------------


def test_write_report_emits_json_and_tables(tmp_path):
    rep = ev.EvalReport(metric="control", values={"mean_sq_err": 2.5},
                        sample_counts={"episodes": 4}, config_hash="ff00", seed=3)
    ev.write_report(rep, tmp_path, {"errors": np.array([[1.0], [4.0]])})
    data = json.loads((tmp_path / "control.json").read_text())
    assert data["config_hash"] == "ff00" and data["seed"] == 3
    table = (tmp_path / "control_errors.tsv").read_text().strip().split("\n")
    assert len(table) == 2
