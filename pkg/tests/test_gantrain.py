import math

import numpy as np
import pytest

from volseg3d import gantrain as _gt
from volseg3d.autodiff import Tensor
from volseg3d.errors import ConfigError, NonFiniteError
from volseg3d.gantrain import (
    GanTrainConfig,
    UnpairedBatch,
    adversarial_loss,
    build_gan_models,
    cycle_loss,
    gan_loss,
    gan_to_intensity,
    generate_synthetic,
    make_optimizers,
    sample_batch,
    spatial_loss,
    spcyclegan_step,
    train_spcyclegan,
)
from volseg3d.networks import DiscriminatorConfig, GeneratorConfig, build_discriminator3d, generator_forward, load_checkpoint
from volseg3d.runlog import read_loss_log

TINY = dict(
    crop_size=(8, 8, 8),
    generator=GeneratorConfig(base_channels=2, n_down=1, n_res=1),
    discriminator=DiscriminatorConfig(base_channels=2, n_layers=2),
)


def _volumes(rng, n=16):
    lab = (rng.random((n, n, n)) < 0.3).astype(np.uint8)
    real = rng.integers(0, 256, (n, n, n), dtype=np.uint8)
    return lab, real


def _batch(rng, cfg):
    lab, real = _volumes(rng)
    return sample_batch([lab], [real], cfg, rng)


def _constant_disc(value):
    """Discriminator whose logit map is ``value`` everywhere (zero weights, constant bias)."""
    d = build_discriminator3d(DiscriminatorConfig(base_channels=2, n_layers=2), np.random.default_rng(0))
    for k, p in d.params.items():
        if k.endswith(".weight"):
            p.data[:] = 0
    d.params["out.conv.bias"].data[:] = value
    return d


def test_zero_logits_give_two_ln2():
    z = Tensor(np.zeros((1, 1, 4, 4, 4)))
    assert adversarial_loss(z, z, "discriminator").item() == pytest.approx(2 * math.log(2), abs=1e-12)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 8, 8, 8)))
    assert gan_loss(_constant_disc(0.0), x, x, "discriminator").item() == pytest.approx(1.386294, abs=1e-6)


def test_generator_loss_vanishes_for_confident_fakes():
    vals = [adversarial_loss(None, Tensor(np.full((1, 1, 2, 2, 2), v)), "generator").item() for v in (0, 5, 20, 40)]
    assert vals[0] == pytest.approx(math.log(2))
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-15


def test_least_squares_targets_met():
    ones, zeros = Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 2, 2, 2)))
    assert adversarial_loss(ones, zeros, "discriminator", "least_squares").item() == 0.0
    assert adversarial_loss(None, ones, "generator", "least_squares").item() == 0.0


class _Offset:
    """Stand-in generator network that adds a constant."""

    def __init__(self, delta):
        self.delta = delta


def _offset_forward(net, x):
    return x + net.delta if isinstance(net, _Offset) else generator_forward(net, x)


@pytest.fixture
def offset_nets(monkeypatch):
    monkeypatch.setattr(_gt, "generator_forward", _offset_forward)


def test_cycle_loss_identity_and_offset(rng, offset_nets):
    a = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    b = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    assert cycle_loss(_Offset(0.0), _Offset(0.0), a, b).item() == 0.0
    # G adds +d, F adds 0: both reconstructions are off by exactly d
    assert cycle_loss(_Offset(0.25), _Offset(0.0), a, b).item() == pytest.approx(0.5, abs=1e-12)
    # swapping the roles of (G, label) and (F, real) leaves the value unchanged
    g, f = _Offset(0.1), _Offset(-0.3)
    assert cycle_loss(g, f, a, b).item() == pytest.approx(cycle_loss(f, g, b, a).item(), abs=1e-12)


def test_spatial_loss_offset(rng, offset_nets):
    a = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    assert spatial_loss(_Offset(0.0), _Offset(0.0), a).item() == 0.0
    assert spatial_loss(_Offset(0.0), _Offset(0.1), a).item() == pytest.approx(0.01, abs=1e-12)


def test_spatial_loss_reaches_g_and_h(rng):
    cfg = GanTrainConfig(**TINY)
    m = build_gan_models(cfg, dtype=np.float64)
    spatial_loss(m.G, m.H, Tensor(rng.standard_normal((1, 1, 8, 8, 8)))).backward()
    assert any(np.abs(p.grad).sum() > 0 for p in m.G.params.values() if p.grad is not None)
    assert any(np.abs(p.grad).sum() > 0 for p in m.H.params.values() if p.grad is not None)


def test_step_updates_every_network_and_logs_consistent_total(rng):
    cfg = GanTrainConfig(**TINY)
    m = build_gan_models(cfg)
    before = {r: n.checksum() for r, n in m.items()}
    out = spcyclegan_step(m, _batch(rng, cfg), cfg, make_optimizers(m, cfg), 1)
    assert all(n.checksum() != before[r] for r, n in m.items())
    rebuilt = out.L_GAN_G + out.L_GAN_F + cfg.lambda1 * out.L_cyc + cfg.lambda2 * out.L_spatial
    assert abs(rebuilt - out.total) <= 1e-6
    assert all(math.isfinite(v) for v in out.as_record().values())


def test_phases_touch_only_their_networks(rng, monkeypatch):
    cfg = GanTrainConfig(**TINY)
    m = build_gan_models(cfg)
    opts = make_optimizers(m, cfg)
    snapshots = []
    original = opts["D1"].step

    def d1_step():
        # generator phase finished; discriminators not yet updated
        snapshots.append({r: n.checksum() for r, n in m.items()})
        original()

    monkeypatch.setattr(opts["D1"], "step", d1_step)
    before = {r: n.checksum() for r, n in m.items()}
    spcyclegan_step(m, _batch(rng, cfg), cfg, opts, 1)
    mid = snapshots[0]
    assert all(mid[r] != before[r] for r in ("G", "F", "H"))
    assert all(mid[r] == before[r] for r in ("D1", "D2"))
    after = {r: n.checksum() for r, n in m.items()}
    assert all(after[r] == mid[r] for r in ("G", "F", "H"))


def test_lambda2_zero_leaves_h_untouched(rng):
    cfg = GanTrainConfig(lambda2=0.0, **TINY)
    m = build_gan_models(cfg)
    h0 = m.H.checksum()
    opts = make_optimizers(m, cfg)
    for it in range(3):
        out = spcyclegan_step(m, _batch(rng, cfg), cfg, opts, it)
        assert out.total == pytest.approx(out.L_GAN_G + out.L_GAN_F + cfg.lambda1 * out.L_cyc, abs=1e-9)
    assert m.H.checksum() == h0


def test_zero_lambdas_reduce_to_adversarial_gradients(rng):
    cfg = GanTrainConfig(lambda1=0.0, lambda2=0.0, **TINY)
    m = build_gan_models(cfg, dtype=np.float64)
    batch = _batch(rng, cfg)
    batch = UnpairedBatch(Tensor(batch.label_crop.data.astype(np.float64)), Tensor(batch.real_crop.data.astype(np.float64)))
    # gradients of the adversarial terms alone, computed independently
    ref = gan_loss(m.D1.frozen(), None, generator_forward(m.G, batch.label_crop), "generator")
    ref = ref + gan_loss(m.D2.frozen(), None, generator_forward(m.F, batch.real_crop), "generator")
    ref.backward()
    expected = {f"{r}:{k}": p.grad.copy() for r in ("G", "F") for k, p in getattr(m, r).params.items()}
    for r in ("G", "F"):
        getattr(m, r).zero_grad()

    captured = {}
    opts = make_optimizers(m, cfg)
    for r in ("G", "F"):
        opt = opts[r]

        def grab(opt=opt, r=r):
            captured.update({f"{r}:{k}": p.grad.copy() for k, p in opt.params.items()})

        opt.step = grab
    spcyclegan_step(m, batch, cfg, opts, 0)
    assert captured.keys() == expected.keys()
    for k in expected:
        np.testing.assert_allclose(captured[k], expected[k], rtol=1e-12, atol=1e-15)


def test_non_finite_loss_names_component(rng):
    cfg = GanTrainConfig(**TINY)
    m = build_gan_models(cfg)
    m.F.params["head.conv.bias"].data[:] = np.inf
    with pytest.raises(NonFiniteError, match="F forward.*iteration 7"):
        spcyclegan_step(m, _batch(rng, cfg), cfg, make_optimizers(m, cfg), 7)


def test_training_zero_iterations(tmp_path, rng):
    lab, real = _volumes(rng)
    cfg = GanTrainConfig(iterations=0, **TINY)
    res = train_spcyclegan(cfg, [lab], [real], tmp_path)
    assert read_loss_log(tmp_path / "loss_log.jsonl") == []
    assert sorted(res.checkpoints) == ["D1", "D2", "F", "G", "H"]
    assert load_checkpoint(res.checkpoints["G"], expect_role="G").checksum() == res.models.G.checksum()


def test_training_is_bit_deterministic(tmp_path, rng):
    lab, real = _volumes(rng)
    cfg = GanTrainConfig(iterations=3, seed=4, checkpoint_every=2, **TINY)
    train_spcyclegan(cfg, [lab], [real], tmp_path / "a")
    train_spcyclegan(cfg, [lab], [real], tmp_path / "b")
    for name in ("loss_log.jsonl", "model_G.ckpt", "model_D2.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    records = read_loss_log(tmp_path / "a" / "loss_log.jsonl")
    assert [r["iteration"] for r in records] == [1, 2, 3]
    assert set(records[0]) == {"iteration", "L_GAN_G", "L_GAN_F", "L_cyc", "L_spatial", "D1", "D2", "total"}


def test_crop_sampling_ranges(rng):
    cfg = GanTrainConfig(**TINY)
    lab, real = _volumes(rng)
    b = sample_batch([lab], [real], cfg, rng)
    assert set(np.unique(b.label_crop.data)) <= {-1.0, 1.0}
    assert b.real_crop.data.min() >= -1 and b.real_crop.data.max() <= 1
    assert b.label_crop.shape == (1, 1, 8, 8, 8)


def test_config_errors(rng):
    lab, real = _volumes(rng, n=6)
    with pytest.raises(ConfigError):
        train_spcyclegan(GanTrainConfig(**TINY), [lab], [real])
    with pytest.raises(ConfigError):
        GanTrainConfig(lambda1=-1)
    with pytest.raises(ConfigError):
        GanTrainConfig(gan_mode="wasserstein")
    with pytest.raises(ConfigError):
        GanTrainConfig(crop_size=(10, 16, 16))


def test_generate_synthetic(rng):
    cfg = GanTrainConfig(**TINY)
    g = build_gan_models(cfg).G
    lab = (rng.random((13, 9, 6)) < 0.3).astype(np.uint8)
    a = generate_synthetic(g, lab)
    assert a.shape == lab.shape and a.dtype == np.uint8
    assert a.tobytes() == generate_synthetic(g, lab).tobytes()


def test_intensity_mapping_bounds():
    out = gan_to_intensity(np.array([-1.0, 0.0, 1.0, -2.0, 3.0]))
    assert out.tolist() == [0, 128, 255, 0, 255]
