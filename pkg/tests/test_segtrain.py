import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volseg3d.autodiff import Tensor
from volseg3d.errors import ConfigError, DimensionError, GeometryError, NonFiniteError
from volseg3d.networks import UNetConfig, build_unet3d, load_checkpoint, unet_forward
from volseg3d.runlog import read_loss_log
from volseg3d.segtrain import (
    SegTrainConfig,
    TrainingPair,
    dice_coefficient,
    prepare_training_set,
    seg_loss,
    split_blocks,
    to_network_input,
    train_unet,
)

TINY = UNetConfig(depth=1, base_channels=2)


def reference_seg_loss(s, t, mu1, mu2):
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    dice = 1 - (2 * (t * s).sum() + 1e-7) / ((t * t).sum() + (s * s).sum() + 1e-7)
    sc = np.clip(s, 1e-7, 1 - 1e-7)
    bce = -np.mean(t * np.log(sc) + (1 - t) * np.log(1 - sc))
    return mu1 * dice + mu2 * bce


def test_fixture_value():
    s = Tensor(np.array([0.5, 0.5]))
    val = seg_loss(s, np.array([1.0, 0.0]), 1, 10).item()
    assert val == pytest.approx(1 / 3 + 10 * math.log(2), abs=1e-6)
    assert val == pytest.approx(7.2648, abs=1e-3)


def test_bce_only_configuration(rng):
    s = rng.uniform(0.05, 0.95, 50)
    t = (rng.random(50) < 0.5).astype(float)
    got = seg_loss(Tensor(s), t, 0, 1).item()
    assert got == pytest.approx(-np.mean(t * np.log(s) + (1 - t) * np.log(1 - s)), rel=1e-12)


def test_perfect_prediction_is_zero(rng):
    t = (rng.random((4, 4, 4)) < 0.4).astype(float)
    assert seg_loss(Tensor(t), t, 1, 10).item() <= 1e-5


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        seg_loss(Tensor(np.zeros(3)), np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30),
    st.integers(0, 2**31 - 1),
    st.floats(0.0, 5.0),
    st.floats(0.0, 20.0),
    st.floats(0.1, 10.0),
)
def test_loss_properties(svals, seed, mu1, mu2, c):
    s = np.array(svals)
    t = (np.random.default_rng(seed).random(len(s)) < 0.5).astype(float)
    val = seg_loss(Tensor(s), t, mu1, mu2).item()
    assert val >= -1e-12
    assert val == pytest.approx(reference_seg_loss(s, t, mu1, mu2), rel=1e-9, abs=1e-12)
    assert seg_loss(Tensor(s), t, c * mu1, c * mu2).item() == pytest.approx(c * val, rel=1e-9, abs=1e-12)


def test_dice_coefficient_examples():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros_like(a)
    assert dice_coefficient(a, b) == 1.0
    a[:2, :2, :2] = 1
    assert dice_coefficient(a, a) == 1.0
    b[2:, 2:, 2:] = 1
    assert dice_coefficient(a, b) == 0.0
    b[:] = 0
    b[:2, :2, :1] = 1
    b[2:, 2:, 2] = 1
    assert int(a.sum()) == 8 and int(b.sum()) == 8 and int((a & b).sum()) == 4
    assert dice_coefficient(a, b) == 0.5


def test_prepare_training_set_partitions(rng):
    lab = (rng.random((128, 128, 128)) < 0.2).astype(np.uint8)
    syn = rng.integers(0, 256, (128, 128, 128), dtype=np.uint8)
    pairs = prepare_training_set([lab], [syn])
    assert len(pairs) == 8 and all(p.label.shape == (64, 64, 64) for p in pairs)
    back = np.zeros_like(lab)
    for n, p in enumerate(pairs):
        i, j, k = n % 2, (n // 2) % 2, n // 4
        back[i * 64:(i + 1) * 64, j * 64:(j + 1) * 64, k * 64:(k + 1) * 64] = p.label
        np.testing.assert_array_equal(p.syn, syn[i * 64:(i + 1) * 64, j * 64:(j + 1) * 64, k * 64:(k + 1) * 64])
    assert back.tobytes() == lab.tobytes()


def test_pair_count_scales_with_sources():
    lab = np.zeros((128, 128, 128), np.uint8)
    assert len(prepare_training_set([lab] * 3, [lab] * 3)) == 24
    # the full-scale count, checked on block arithmetic without allocating 200 volumes
    assert 200 * len(split_blocks(np.zeros((128, 128, 128), bool))) == 1600


def test_prepare_rejects_bad_dims():
    with pytest.raises(GeometryError):
        prepare_training_set([np.zeros((128, 128, 100))], [np.zeros((128, 128, 100))])


def test_input_normalization():
    x = to_network_input(np.array([[[0, 255]]], dtype=np.uint8))
    assert x.shape == (1, 1, 1, 1, 2) and x.max() == 1.0 and x.min() == 0.0


def _toy_pairs(rng, n=3, size=4):
    pairs = []
    for _ in range(n):
        lab = (rng.random((size,) * 3) < 0.4).astype(np.uint8)
        syn = np.where(lab > 0, 200, 30).astype(np.uint8)
        pairs.append(TrainingPair(syn, lab))
    return pairs


def test_zero_epochs_writes_initial_checkpoint(tmp_path, rng):
    cfg = SegTrainConfig(epochs=0, unet=TINY)
    res = train_unet(cfg, _toy_pairs(rng), tmp_path)
    assert read_loss_log(tmp_path / "loss_log.jsonl") == []
    init = build_unet3d(TINY, np.random.default_rng(np.random.SeedSequence(0).spawn(2)[0]))
    assert load_checkpoint(res.final_checkpoint).checksum() == init.checksum()
    assert res.best_checkpoint.exists()


def test_training_is_deterministic(tmp_path, rng):
    pairs = _toy_pairs(rng)
    cfg = SegTrainConfig(epochs=2, V=2, unet=TINY, seed=5)
    train_unet(cfg, pairs, tmp_path / "a")
    train_unet(cfg, pairs, tmp_path / "b")
    a = (tmp_path / "a" / "loss_log.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "loss_log.jsonl").read_bytes()
    assert len(read_loss_log(tmp_path / "a" / "loss_log.jsonl")) == 4
    assert (tmp_path / "a" / "model_M_final.ckpt").read_bytes() == (tmp_path / "b" / "model_M_final.ckpt").read_bytes()


def test_v_subset_is_prefix_of_seeded_shuffle(rng, monkeypatch):
    import volseg3d.segtrain as mod

    seen = []
    original = mod._batch

    def spy(pairs_, idx, dtype):
        seen.extend(int(i) for i in idx)
        return original(pairs_, idx, dtype)

    monkeypatch.setattr(mod, "_batch", spy)
    train_unet(SegTrainConfig(epochs=1, V=3, unet=TINY, seed=9), _toy_pairs(rng, n=5))
    expected = np.random.default_rng(np.random.SeedSequence(9).spawn(2)[1]).permutation(5)[:3]
    assert seen == expected.tolist()


def test_one_small_step_decreases_loss(rng):
    pair = _toy_pairs(rng, n=1, size=8)[0]
    cfg = SegTrainConfig(epochs=1, learning_rate=1e-4, unet=UNetConfig(depth=1, base_channels=4), seed=2)
    net = build_unet3d(cfg.unet, np.random.default_rng(2), dtype=np.float64)
    x = Tensor(to_network_input(pair.syn, np.float64))
    t = pair.label[None, None].astype(np.float64)
    before_net = build_unet3d(cfg.unet, np.random.default_rng(2), dtype=np.float64)
    train_unet(cfg, [pair], net=net)
    # compare with batch statistics, the mode the step optimized
    before = seg_loss(unet_forward(before_net, x, training=True), t).item()
    after = seg_loss(unet_forward(net, x, training=True), t).item()
    assert after < before


def test_non_finite_loss_aborts_with_batch_index(rng):
    pairs = _toy_pairs(rng, n=2)
    net = build_unet3d(TINY, rng)
    net.params["head.weight"].data[:] = np.nan
    with pytest.raises(NonFiniteError, match="batch 0"):
        train_unet(SegTrainConfig(epochs=1, unet=TINY), pairs, net=net)


def test_config_validation():
    with pytest.raises(ConfigError):
        SegTrainConfig(mu1=-1)
    with pytest.raises(ConfigError):
        SegTrainConfig(V=0)
    with pytest.raises(ConfigError):
        train_unet(SegTrainConfig(V=5, unet=TINY), _toy_pairs(np.random.default_rng(0), n=2))


def test_pair_validation():
    with pytest.raises(ValueError):
        TrainingPair(np.zeros((2, 2, 2)), np.full((2, 2, 2), 2))
    with pytest.raises(DimensionError):
        TrainingPair(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
