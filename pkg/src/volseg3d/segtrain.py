"""Training of the segmentation U-Net (model M) on paired synthetic volumes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, GeometryError, NonFiniteError, OptimizerError
from .networks import NetworkParams, UNetConfig, build_unet3d, save_checkpoint, unet_forward
from .runlog import LossLog

BLOCK = 64


@dataclass
class SegTrainConfig:
    mu1: float = 1.0
    mu2: float = 10.0
    learning_rate: float = 1e-3
    V: int | None = None  # None: use every pair
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    max_steps: int | None = None
    block_size: int = BLOCK
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        if self.mu1 < 0 or self.mu2 < 0:
            raise ConfigError(f"mu1 and mu2 must be non-negative, got {self.mu1}, {self.mu2}")
        if self.V is not None and self.V < 1:
            raise ConfigError(f"V must be at least 1, got {self.V}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"need epochs >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be positive, got {self.block_size}")


@dataclass
class TrainingPair:
    syn: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.syn.shape != self.label.shape:
            raise DimensionError(f"syn {self.syn.shape} and label {self.label.shape} differ")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("training labels must be strictly binary")


@dataclass
class SegTrainResult:
    net: NetworkParams
    log: LossLog
    best_loss: float
    best_checkpoint: Path | None = None
    final_checkpoint: Path | None = None


def seg_loss(s: Tensor, t, mu1: float = 1.0, mu2: float = 10.0) -> Tensor:
    """mu1 * Dice loss + mu2 * BCE."""
    return seg_loss_terms(s, t, mu1, mu2)[0]


def seg_loss_terms(s: Tensor, t, mu1: float, mu2: float) -> tuple[Tensor, Tensor, Tensor]:
    """(total, Dice term, BCE term), the terms unweighted."""
    t = ad.as_tensor(t, dtype=s.dtype)
    if s.shape != t.shape:
        raise DimensionError(f"seg_loss: prediction {s.shape} and target {t.shape} differ")
    d, b = ad.dice_loss(s, t), ad.bce_loss(s, t)
    return d * mu1 + b * mu2, d, b


def dice_coefficient(pred, gt) -> float:
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} and groundtruth {g.shape} differ")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & g)) / denom


def split_blocks(v: np.ndarray, block: int = BLOCK) -> list[np.ndarray]:
    """Adjacent non-overlapping cubes in x-fastest order."""
    if any(n % block for n in v.shape):
        raise GeometryError(f"volume dims {v.shape} are not multiples of {block}")
    nx, ny, nz = (n // block for n in v.shape)
    return [
        v[i * block:(i + 1) * block, j * block:(j + 1) * block, k * block:(k + 1) * block].copy()
        for k in range(nz)
        for j in range(ny)
        for i in range(nx)
    ]


def prepare_training_set(label_volumes, syn_volumes, block: int = BLOCK) -> list[TrainingPair]:
    if len(label_volumes) != len(syn_volumes):
        raise ValueError(f"{len(label_volumes)} label volumes but {len(syn_volumes)} synthetic volumes")
    pairs = []
    for lab, syn in zip(label_volumes, syn_volumes):
        if lab.shape != syn.shape:
            raise DimensionError(f"label {lab.shape} and synthetic {syn.shape} differ")
        for lb, sb in zip(split_blocks(np.asarray(lab), block), split_blocks(np.asarray(syn), block)):
            pairs.append(TrainingPair(sb, (lb > 0).astype(np.uint8)))
    return pairs


def to_network_input(v: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(X,Y,Z) intensities -> (1,1,X,Y,Z) in [0,1]; 8-bit data is divided by 255."""
    v = np.asarray(v)
    x = v.astype(np.float64) / 255.0 if v.dtype == np.uint8 else v.astype(np.float64)
    return x[None, None].astype(dtype)


def _batch(pairs, idx, dtype):
    x = np.concatenate([to_network_input(pairs[i].syn, dtype) for i in idx])
    t = np.stack([pairs[i].label for i in idx])[:, None].astype(dtype)
    return Tensor(x), t


def predict(net: NetworkParams, syn: np.ndarray) -> np.ndarray:
    """Eval-mode probability volume (X,Y,Z)."""
    x = Tensor(to_network_input(syn, net.params["head.weight"].dtype))
    return unet_forward(net.frozen(), x, training=False).data[0, 0]


def train_unet(cfg: SegTrainConfig, pairs, out_dir=None, net: NetworkParams | None = None) -> SegTrainResult:
    """Adam on the seeded shuffle of ``pairs``; the first V shuffled pairs form the training subset."""
    if not pairs:
        raise ConfigError("no training pairs")
    v = len(pairs) if cfg.V is None else cfg.V
    if v > len(pairs):
        raise ConfigError(f"V={v} exceeds the {len(pairs)} available pairs")
    init_ss, order_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    if net is None:
        net = build_unet3d(cfg.unet, np.random.default_rng(init_ss))
    order = np.random.default_rng(order_ss).permutation(len(pairs))[:v]
    dtype = net.params["head.weight"].dtype

    out = Path(out_dir) if out_dir is not None else None
    log = LossLog(out / "loss_log.jsonl" if out else None)
    opt = ad.Adam(net.params, lr=cfg.learning_rate)
    best_loss = float("inf")
    best_path = final_path = None
    if out is not None:
        best_path = save_checkpoint(out / "model_M_best.ckpt", net)

    step = 0
    done = False
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for b0 in range(0, v, cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
            idx = order[b0:b0 + cfg.batch_size]
            x, t = _batch(pairs, idx, dtype)
            opt.zero_grad()
            try:
                s = unet_forward(net, x, training=True)
                total, d, b = seg_loss_terms(s, t, cfg.mu1, cfg.mu2)
                total.backward()
                opt.step()
            except (NonFiniteError, OptimizerError) as exc:
                raise NonFiniteError(f"training aborted at epoch {epoch}, batch {b0 // cfg.batch_size}: {exc}") from exc
            loss = total.item()
            epoch_losses.append(loss)
            log.append(
                {"step": step, "epoch": epoch, "batch": b0 // cfg.batch_size, "L_seg": loss, "L_dice": d.item(), "L_bce": b.item()}
            )
            step += 1
        if epoch_losses:
            mean = float(np.mean(epoch_losses))
            if mean < best_loss:
                best_loss = mean
                if out is not None:
                    best_path = save_checkpoint(out / "model_M_best.ckpt", net)
        if done:
            break
    if out is not None:
        final_path = save_checkpoint(out / "model_M_final.ckpt", net)
    return SegTrainResult(net, log, best_loss, best_path, final_path)
