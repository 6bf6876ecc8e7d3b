import numpy as np
import pytest

from pokeflow.conditioning import (ConditionEncoders, Poke, build_poke_map,
                                   pretrain_condition_encoders)


def test_poke_map_single_poke():
    c = build_poke_map([Poke(shift=(2.0, -1.0), location=(5, 7))], 8, 8)
    assert c.shape == (8, 8, 2)
    np.testing.assert_array_equal(c[5, 7], [2.0, -1.0])
    assert np.abs(c).sum() == 3.0


def test_poke_map_empty_is_zero():
    assert build_poke_map([], 16, 16).sum() == 0.0


def test_poke_map_five_pokes_ten_nonzeros():
    pokes = [Poke(shift=(1.0, 1.0), location=(i, i + 1)) for i in range(5)]
    c = build_poke_map(pokes, 8, 8)
    assert np.count_nonzero(c) == 10


def test_poke_map_sparsity_counts_distinct_pixels():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        locs = set()
        pokes = []
        while len(pokes) < n:
            loc = (int(rng.integers(12)), int(rng.integers(12)))
            if loc in locs:
                continue
            locs.add(loc)
            s = rng.normal(size=2)
            s[s == 0] = 1.0
            pokes.append(Poke(shift=(float(s[0]), float(s[1])), location=loc))
        c = build_poke_map(pokes, 12, 12)
        assert np.count_nonzero(c) == 2 * len(locs)


def test_poke_map_out_of_bounds_rejected():
    with pytest.raises(ValueError, match="outside"):
        build_poke_map([Poke(shift=(1.0, 1.0), location=(8, 0))], 8, 8)


def test_poke_map_overlap_last_writer_wins(caplog):
    pokes = [Poke(shift=(1.0, 0.0), location=(2, 2)),
             Poke(shift=(0.0, 3.0), location=(2, 2))]
    with caplog.at_level("WARNING"):
        c = build_poke_map(pokes, 4, 4)
    np.testing.assert_array_equal(c[2, 2], [0.0, 3.0])
    assert any("last writer" in r.message for r in caplog.records)


def test_poke_map_order_independent_for_distinct_pixels():
    pokes = [Poke(shift=(1.0, 2.0), location=(1, 1)),
             Poke(shift=(-1.0, 0.5), location=(3, 2))]
    a = build_poke_map(pokes, 6, 6)
    b = build_poke_map(pokes[::-1], 6, 6)
    np.testing.assert_array_equal(a, b)


# -- encoders -------------------------------------------------------------------


def test_encode_zero_inputs_zero_bias_gives_zero_features():
    enc = ConditionEncoders()
    feats = enc.encode(np.zeros((2, 32, 32, 3), np.float32),
                       np.zeros((2, 32, 32, 2), np.float32))
    assert np.all(feats.f_x0 == 0)
    assert np.all(feats.f_c == 0)


def test_encode_deterministic():
    enc = ConditionEncoders(seed=3)
    rng = np.random.default_rng(1)
    x0 = rng.random((1, 32, 32, 3)).astype(np.float32)
    c = np.zeros((1, 32, 32, 2), np.float32)
    c[0, 10, 12] = [2.0, -1.0]
    f1 = enc.encode(x0, c)
    f2 = enc.encode(x0, c)
    np.testing.assert_array_equal(f1.f_x0, f2.f_x0)
    np.testing.assert_array_equal(f1.f_c, f2.f_c)


def test_encode_spatial_shape_matches_flow_grid():
    enc = ConditionEncoders(d_x=8, d_c=8)
    feats = enc.encode(np.zeros((1, 32, 32, 3), np.float32),
                       np.zeros((1, 32, 32, 2), np.float32))
    assert feats.f_x0.shape == (1, 4, 4, 8)
    assert feats.f_c.shape == (1, 4, 4, 8)
    assert feats.stacked().shape == (1, 4, 4, 16)


def test_poke_translation_moves_dominant_activation():
    # zero background: shifting the poke by whole cells shifts the argmax cell
    enc = ConditionEncoders(seed=0)
    x0 = np.zeros((1, 32, 32, 3), np.float32)

    def argmax_cell(row, col):
        c = np.zeros((1, 32, 32, 2), np.float32)
        c[0, row, col] = [3.0, -2.0]
        f = enc.encode(x0, c).f_c[0]
        mag = np.abs(f).sum(axis=-1)
        return np.unravel_index(np.argmax(mag), mag.shape)

    base = argmax_cell(9, 9)
    for dr, dc in [(8, 0), (0, 8), (8, 8), (16, 8)]:
        moved = argmax_cell(9 + dr, 9 + dc)
        expect = (base[0] + dr // 8, base[1] + dc // 8)
        assert abs(moved[0] - expect[0]) <= 1 and abs(moved[1] - expect[1]) <= 1, \
            (base, moved, expect)


def test_encode_shape_mismatch_rejected():
    enc = ConditionEncoders()
    with pytest.raises(Exception, match="encode_condition"):
        enc.encode(np.zeros((1, 32, 32, 3), np.float32),
                   np.zeros((1, 16, 16, 2), np.float32))


def test_zero_step_pretraining_leaves_params_unchanged():
    enc = ConditionEncoders(seed=5)
    before = {k: v.data.copy() for k, v in enc.params().items()}
    frames = np.random.default_rng(0).random((4, 32, 32, 3)).astype(np.float32)
    flows = np.zeros((4, 32, 32, 2), np.float32)
    maps = np.zeros((4, 32, 32, 2), np.float32)
    pretrain_condition_encoders(enc, frames, flows, maps, steps=0)
    for k, v in enc.params().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_short_pretraining_reduces_losses():
    rng = np.random.default_rng(7)
    frames = rng.random((12, 32, 32, 3)).astype(np.float32)
    flows = rng.normal(size=(12, 32, 32, 2)).astype(np.float32)
    maps = np.zeros((12, 32, 32, 2), np.float32)
    enc = ConditionEncoders(seed=2)
    hist = pretrain_condition_encoders(enc, frames, flows, maps, steps=40, batch=6)
    assert np.mean(hist["frame_l1"][-5:]) < np.mean(hist["frame_l1"][:5])
    assert np.mean(hist["flow_l1"][-5:]) < np.mean(hist["flow_l1"][:5])
