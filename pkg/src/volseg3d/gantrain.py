"""Spatially constrained CycleGAN training.

Five networks: G (label -> microscopy), F (microscopy -> label), H (maps
G's output back to the label so nuclei stay where the label put them), and
the discriminators D1 (microscopy domain) and D2 (label domain).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NonFiniteError, OptimizerError
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    NetworkParams,
    build_discriminator3d,
    build_generator3d,
    discriminator_forward,
    generator_forward,
    generator_multiple,
    save_checkpoint,
)
from .runlog import LossLog

GAN_MODES = ("log", "least_squares")
LOG_KEYS = ("iteration", "L_GAN_G", "L_GAN_F", "L_cyc", "L_spatial", "D1", "D2", "total")


@dataclass
class GanTrainConfig:
    lambda1: float = 10.0
    lambda2: float = 10.0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    iterations: int = 100
    crop_size: tuple[int, int, int] = (16, 16, 16)
    batch_size: int = 1
    seed: int = 0
    gan_mode: str = "log"
    checkpoint_every: int = 0  # 0: only the final checkpoints
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig(**self.generator)
        if isinstance(self.discriminator, dict):
            self.discriminator = DiscriminatorConfig(**self.discriminator)
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"lambda1 and lambda2 must be non-negative, got {self.lambda1}, {self.lambda2}")
        if self.gan_mode not in GAN_MODES:
            raise ConfigError(f"gan_mode must be one of {GAN_MODES}, got {self.gan_mode!r}")
        if len(self.crop_size) != 3 or min(self.crop_size) < 1:
            raise ConfigError(f"crop_size must be three positive integers, got {self.crop_size}")
        if self.iterations < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ConfigError("iterations and checkpoint_every must be >= 0 and batch_size >= 1")
        mult = generator_multiple(self.generator)
        if any(c % m for c, m in zip(self.crop_size, mult)):
            raise ConfigError(f"crop_size {self.crop_size} must be a multiple of {mult} for this generator")


@dataclass
class GanModels:
    G: NetworkParams
    F: NetworkParams
    H: NetworkParams
    D1: NetworkParams
    D2: NetworkParams

    def items(self):
        return [("G", self.G), ("F", self.F), ("H", self.H), ("D1", self.D1), ("D2", self.D2)]


@dataclass
class UnpairedBatch:
    label_crop: Tensor  # values in {-1, +1}
    real_crop: Tensor  # values in [-1, 1]


@dataclass
class LossBreakdown:
    iteration: int
    L_GAN_G: float
    L_GAN_F: float
    L_cyc: float
    L_spatial: float
    D1: float
    D2: float
    total: float

    def as_record(self) -> dict:
        return asdict(self)


def build_gan_models(cfg: GanTrainConfig, seed: int | None = None, dtype=np.float32) -> GanModels:
    ss = np.random.SeedSequence(cfg.seed if seed is None else seed).spawn(5)
    rngs = [np.random.default_rng(s) for s in ss]
    return GanModels(
        G=build_generator3d(cfg.generator, rngs[0], "G", dtype),
        F=build_generator3d(cfg.generator, rngs[1], "F", dtype),
        H=build_generator3d(cfg.generator, rngs[2], "H", dtype),
        D1=build_discriminator3d(cfg.discriminator, rngs[3], "D1", dtype),
        D2=build_discriminator3d(cfg.discriminator, rngs[4], "D2", dtype),
    )


def make_optimizers(models: GanModels, cfg: GanTrainConfig) -> dict[str, ad.Adam]:
    betas = (cfg.beta1, cfg.beta2)
    return {role: ad.Adam(net.params, lr=cfg.learning_rate, betas=betas) for role, net in models.items()}


# ------------------------------------------------------------------ losses
def adversarial_loss(real_logits: Tensor | None, fake_logits: Tensor, side: str, mode: str = "log") -> Tensor:
    """Loss from discriminator logit maps; expectations are means over the map."""
    if mode not in GAN_MODES:
        raise ConfigError(f"unknown gan mode {mode!r}")
    if side == "generator":
        if mode == "log":
            return ad.softplus(-fake_logits).mean()  # -log sigmoid(D(fake))
        return ad.mse_loss(fake_logits, np.ones(fake_logits.shape))
    if side != "discriminator":
        raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")
    if mode == "log":
        return ad.softplus(-real_logits).mean() + ad.softplus(fake_logits).mean()
    return ad.mse_loss(real_logits, np.ones(real_logits.shape)) + ad.mse_loss(fake_logits, np.zeros(fake_logits.shape))


def gan_loss(D: NetworkParams, real: Tensor | None, fake: Tensor, side: str, mode: str = "log") -> Tensor:
    if side == "discriminator":
        return adversarial_loss(discriminator_forward(D, real), discriminator_forward(D, fake.detach()), side, mode)
    return adversarial_loss(None, discriminator_forward(D, fake), side, mode)


def cycle_loss(G, F, label_crop: Tensor, real_crop: Tensor, fake_real=None, fake_label=None) -> Tensor:
    """L1(F(G(label)), label) + L1(G(F(real)), real); pass precomputed G(label), F(real) to reuse them."""
    fake_real = generator_forward(G, label_crop) if fake_real is None else fake_real
    fake_label = generator_forward(F, real_crop) if fake_label is None else fake_label
    return ad.l1_loss(generator_forward(F, fake_real), label_crop) + ad.l1_loss(generator_forward(G, fake_label), real_crop)


def spatial_loss(G, H, label_crop: Tensor, fake_real=None) -> Tensor:
    """Mean squared error between H(G(label)) and label."""
    fake_real = generator_forward(G, label_crop) if fake_real is None else fake_real
    return ad.mse_loss(generator_forward(H, fake_real), label_crop)


# ------------------------------------------------------------------ training
def _guard(name: str, iteration: int, fn):
    try:
        out = fn()
    except (NonFiniteError, OptimizerError) as exc:
        raise NonFiniteError(f"{name} became non-finite at iteration {iteration}: {exc}") from exc
    if isinstance(out, Tensor) and out.size == 1 and not math.isfinite(out.item()):
        raise NonFiniteError(f"{name} became non-finite at iteration {iteration}")
    return out


def spcyclegan_step(
    models: GanModels, batch: UnpairedBatch, cfg: GanTrainConfig, optimizers: dict[str, ad.Adam], iteration: int = 0
) -> LossBreakdown:
    """One alternating update: generators (G, F, H) first, then discriminators on detached fakes."""
    label, real = batch.label_crop, batch.real_crop
    mode = cfg.gan_mode
    use_h = cfg.lambda2 > 0
    gen_roles = ("G", "F", "H") if use_h else ("G", "F")
    # discriminators are read-only in this phase: their frozen copies pass gradients to inputs only
    d1, d2 = models.D1.frozen(), models.D2.frozen()
    for r in ("G", "F", "H", "D1", "D2"):
        optimizers[r].zero_grad()

    fake_real = _guard("G forward", iteration, lambda: generator_forward(models.G, label))
    fake_label = _guard("F forward", iteration, lambda: generator_forward(models.F, real))
    l_gan_g = _guard("L_GAN_G", iteration, lambda: gan_loss(d1, None, fake_real, "generator", mode))
    l_gan_f = _guard("L_GAN_F", iteration, lambda: gan_loss(d2, None, fake_label, "generator", mode))
    l_cyc = _guard("L_cyc", iteration, lambda: cycle_loss(models.G, models.F, label, real, fake_real, fake_label))
    if use_h:
        l_sp = _guard("L_spatial", iteration, lambda: spatial_loss(models.G, models.H, label, fake_real))
    else:
        # logged for monitoring only; H stays untouched
        l_sp = _guard("L_spatial", iteration, lambda: spatial_loss(None, models.H.frozen(), label, fake_real.detach()))
    total = l_gan_g + l_gan_f + l_cyc * cfg.lambda1
    if use_h:
        total = total + l_sp * cfg.lambda2
    _guard("total", iteration, total.backward)
    for r in gen_roles:
        _guard(f"{r} update", iteration, optimizers[r].step)

    l_d1 = _guard("D1", iteration, lambda: gan_loss(models.D1, real, fake_real, "discriminator", mode))
    l_d2 = _guard("D2", iteration, lambda: gan_loss(models.D2, label, fake_label, "discriminator", mode))
    _guard("D1", iteration, l_d1.backward)
    _guard("D2", iteration, l_d2.backward)
    optimizers["D1"].step()
    optimizers["D2"].step()
    for r in ("G", "F", "H"):
        optimizers[r].zero_grad()

    return LossBreakdown(
        iteration=iteration,
        L_GAN_G=l_gan_g.item(),
        L_GAN_F=l_gan_f.item(),
        L_cyc=l_cyc.item(),
        L_spatial=l_sp.item(),
        D1=l_d1.item(),
        D2=l_d2.item(),
        total=total.item(),
    )


def label_to_gan(v: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(v) > 0, 1.0, -1.0)


def intensity_to_gan(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64) / 127.5 - 1.0


def gan_to_intensity(y: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(y, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _random_crop(volumes, size, rng) -> np.ndarray:
    v = volumes[int(rng.integers(len(volumes)))]
    corner = [int(rng.integers(0, n - c + 1)) for n, c in zip(v.shape, size)]
    return v[tuple(slice(a, a + c) for a, c in zip(corner, size))]


def sample_batch(label_volumes, real_volumes, cfg: GanTrainConfig, rng, dtype=np.float32) -> UnpairedBatch:
    """Independent uniform crops from each side."""
    labs = [label_to_gan(_random_crop(label_volumes, cfg.crop_size, rng)) for _ in range(cfg.batch_size)]
    reals = [intensity_to_gan(_random_crop(real_volumes, cfg.crop_size, rng)) for _ in range(cfg.batch_size)]
    return UnpairedBatch(Tensor(np.stack(labs)[:, None].astype(dtype)), Tensor(np.stack(reals)[:, None].astype(dtype)))


@dataclass
class GanTrainResult:
    models: GanModels
    log: LossLog
    checkpoints: dict[str, Path] = field(default_factory=dict)


def _save_all(models: GanModels, out: Path) -> dict[str, Path]:
    return {role: save_checkpoint(out / f"model_{role}.ckpt", net) for role, net in models.items()}


def train_spcyclegan(cfg: GanTrainConfig, label_volumes, real_volumes, out_dir=None, models: GanModels | None = None) -> GanTrainResult:
    if not label_volumes or not real_volumes:
        raise ConfigError("need at least one label volume and one real volume")
    for v in list(label_volumes) + list(real_volumes):
        if any(c > n for c, n in zip(cfg.crop_size, v.shape)):
            raise ConfigError(f"crop {cfg.crop_size} does not fit in a source volume of dims {v.shape}")
    init_seed, crop_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    if models is None:
        models = build_gan_models(cfg, seed=int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(crop_ss)
    opts = make_optimizers(models, cfg)
    out = Path(out_dir) if out_dir is not None else None
    log = LossLog(out / "loss_log.jsonl" if out else None)
    ckpts: dict[str, Path] = {}
    for it in range(1, cfg.iterations + 1):
        batch = sample_batch(label_volumes, real_volumes, cfg, rng)
        log.append(spcyclegan_step(models, batch, cfg, opts, it).as_record())
        if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            ckpts = _save_all(models, out)
    if out is not None:
        ckpts = _save_all(models, out)
    return GanTrainResult(models, log, ckpts)


def generate_synthetic(G: NetworkParams, label_volume: np.ndarray) -> np.ndarray:
    """Synthetic 8-bit microscopy paired voxel-for-voxel with ``label_volume``."""
    lab = label_to_gan(label_volume)
    mult = generator_multiple(G)
    pads = [(0, -n % m) for n, m in zip(lab.shape, mult)]
    x = np.pad(lab, pads, constant_values=-1.0)
    dtype = G.params["head.conv.weight"].dtype
    y = generator_forward(G.frozen(), Tensor(x[None, None].astype(dtype))).data[0, 0]
    X, Y, Z = lab.shape
    return gan_to_intensity(y[:X, :Y, :Z])
