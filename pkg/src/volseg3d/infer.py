"""Sliding-window segmentation of volumes of any size.

Each 64^3 window is run through the network and only its central 32^3 is
kept; windows advance by 32, so the kept crops tile the volume exactly once.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, ModelError, ParameterError
from .networks import NetworkParams, unet_forward
from .segtrain import to_network_input

WINDOW, STRIDE, HALO = 64, 32, 16


def round_up(n: int, m: int) -> int:
    return -(-n // m) * m


@dataclass(frozen=True)
class TileGrid:
    original_dims: tuple[int, int, int]
    window: int = WINDOW
    stride: int = STRIDE
    halo: int = HALO

    def __post_init__(self):
        if len(self.original_dims) != 3 or any(int(n) < 1 for n in self.original_dims):
            raise DimensionError(f"dims must be three positive integers, got {self.original_dims}")
        if self.window != self.stride + 2 * self.halo:
            raise ParameterError("window must equal stride + 2*halo so that central crops tile exactly")

    @property
    def crop(self) -> int:
        return self.stride

    @property
    def extended_dims(self) -> tuple[int, int, int]:
        return tuple(round_up(n, self.stride) for n in self.original_dims)

    @property
    def padded_dims(self) -> tuple[int, int, int]:
        return tuple(n + 2 * self.halo for n in self.extended_dims)

    @property
    def window_starts(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(range(0, n, self.stride)) for n in self.extended_dims)

    @property
    def n_windows(self) -> int:
        return int(np.prod([len(s) for s in self.window_starts]))

    def windows(self):
        """Padded-space window corners, x fastest."""
        sx, sy, sz = self.window_starts
        for z, y, x in product(sz, sy, sx):
            yield (x, y, z)


def plan_tiles(dims) -> TileGrid:
    return TileGrid(tuple(int(n) for n in dims))


def pad_volume(v: np.ndarray, grid: TileGrid) -> np.ndarray:
    """Zero halo on every face plus zero extension to a multiple of the stride on the far faces."""
    if tuple(v.shape) != grid.original_dims:
        raise DimensionError(f"volume {v.shape} does not match grid planned for {grid.original_dims}")
    h = grid.halo
    widths = [(h, h + e - n) for n, e in zip(v.shape, grid.extended_dims)]
    return np.pad(v, widths, mode="constant")


@dataclass
class SegmentationResult:
    prob: np.ndarray
    seg: np.ndarray
    write_count: np.ndarray


ModelFn = Callable[[np.ndarray], np.ndarray]


def _as_model(model) -> tuple[ModelFn, np.dtype]:
    if isinstance(model, NetworkParams):
        if model.role != "M":
            raise ModelError(f"segmentation needs a U-Net (role M), got role {model.role!r}")
        frozen = model.frozen()
        dtype = frozen.params["head.weight"].dtype
        return (lambda x: unet_forward(frozen, Tensor(x), training=False).data), dtype
    if callable(model):
        return model, np.dtype(np.float32)
    raise ModelError(f"cannot segment with {type(model).__name__}")


def segment_volume(
    model,
    v: np.ndarray,
    grid: TileGrid | None = None,
    threshold: float = 0.5,
    batch_size: int = 1,
    workers: int = 1,
) -> SegmentationResult:
    """Probability map, thresholded segmentation and a per-voxel write-count audit.

    ``model`` is a role-M NetworkParams or any callable mapping a
    (N,1,64,64,64) float array to an array of the same shape.
    """
    v = np.asarray(v)
    grid = grid or plan_tiles(v.shape)
    if batch_size < 1 or workers < 1:
        raise ParameterError(f"batch_size and workers must be positive, got {batch_size}, {workers}")
    fn, dtype = _as_model(model)
    padded = to_network_input(pad_volume(v, grid), dtype)[0, 0]
    ext = grid.extended_dims
    prob = np.zeros(ext, dtype=np.float32)
    count = np.zeros(ext, dtype=np.uint8)
    w, h, c = grid.window, grid.halo, grid.crop
    corners = list(grid.windows())
    batches = [corners[i:i + batch_size] for i in range(0, len(corners), batch_size)]

    def run(batch):
        x = np.stack([padded[a:a + w, b:b + w, d:d + w] for a, b, d in batch])[:, None]
        out = np.asarray(fn(x))
        if out.shape != x.shape:
            raise DimensionError(f"model returned {out.shape} for input {x.shape}")
        # disjoint output regions: safe to write from several threads
        for (a, b, d), o in zip(batch, out):
            prob[a:a + c, b:b + c, d:d + c] = o[0, h:h + c, h:h + c, h:h + c]
            count[a:a + c, b:b + c, d:d + c] += 1

    if workers == 1:
        for batch in batches:
            run(batch)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, batches))

    X, Y, Z = grid.original_dims
    prob = prob[:X, :Y, :Z]
    return SegmentationResult(prob, (prob >= threshold).astype(np.uint8), count)
