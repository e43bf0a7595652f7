"""Connected components, small-object removal, voxel metrics and label colouring."""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError

_RANK = {6: 1, 18: 2, 26: 3}


def _zmajor(v: np.ndarray) -> np.ndarray:
    # (X,Y,Z) -> (Z,Y,X) so that C-order raster scan is z-major, x fastest
    return v.transpose(2, 1, 0)


def _relabel_in_scan_order(labels: np.ndarray) -> np.ndarray:
    flat = _zmajor(labels).reshape(-1)
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.uint32)
    lut[ids[np.argsort(first)]] = np.arange(1, len(ids) + 1, dtype=np.uint32)
    return lut[labels]


def connected_components_3d(v: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Label foreground components; labels are 1..K in order of first voxel (z-major scan)."""
    if connectivity not in _RANK:
        raise ParameterError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, _RANK[connectivity])
    labels, _ = ndimage.label(np.asarray(v) > 0, structure=structure)
    return _relabel_in_scan_order(labels.astype(np.uint32))


def component_sizes(labels: np.ndarray) -> np.ndarray:
    """Voxel count per label; entry 0 is the background."""
    return np.bincount(labels.reshape(-1).astype(np.int64))


def remove_small_components(labels: np.ndarray, min_size: int = 100) -> np.ndarray:
    """Drop components with fewer than ``min_size`` voxels and relabel the survivors 1..K."""
    if min_size < 0:
        raise ParameterError(f"min_size must be non-negative, got {min_size}")
    sizes = component_sizes(labels)
    small = sizes < min_size
    small[0] = False
    if not small.any():
        return labels.astype(np.uint32, copy=True)
    cleaned = np.where(small[labels], 0, labels).astype(np.uint32)
    return _relabel_in_scan_order(cleaned)


@dataclass(frozen=True)
class MetricsReport:
    n_tp: int
    n_tn: int
    n_fp: int
    n_fn: int

    @property
    def n_total(self) -> int:
        return self.n_tp + self.n_tn + self.n_fp + self.n_fn

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.n_tp + self.n_tn, self.n_total)

    @property
    def type1(self) -> Fraction:
        return Fraction(self.n_fp, self.n_total)

    @property
    def type2(self) -> Fraction:
        return Fraction(self.n_fn, self.n_total)

    def as_dict(self) -> dict:
        return {
            "n_TP": self.n_tp,
            "n_TN": self.n_tn,
            "n_FP": self.n_fp,
            "n_FN": self.n_fn,
            "n_total": self.n_total,
            "accuracy": float(self.accuracy),
            "type1": float(self.type1),
            "type2": float(self.type2),
        }

    def write(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.as_dict(), indent=2) + "\n")
        return p


def compute_metrics(seg: np.ndarray, gt: np.ndarray) -> MetricsReport:
    """Voxel confusion counts of a binary segmentation against binary groundtruth."""
    if seg.shape != gt.shape:
        raise DimensionError(f"segmentation {seg.shape} and groundtruth {gt.shape} differ")
    s = np.asarray(seg) > 0
    g = np.asarray(gt) > 0
    tp = int(np.count_nonzero(s & g))
    fp = int(np.count_nonzero(s & ~g))
    fn = int(np.count_nonzero(~s & g))
    tn = int(s.size - tp - fp - fn)
    return MetricsReport(tp, tn, fp, fn)


def make_palette(k: int, seed: int = 0) -> np.ndarray:
    """``k`` pairwise-distinct RGB colours (uint8, shape (k, 3)), none of them black."""
    if k > 256**3 - 1:
        raise ParameterError(f"cannot make {k} distinct colours")
    rng = np.random.default_rng(seed)
    seen = {0}
    out = np.zeros((k, 3), dtype=np.uint8)
    i = 0
    while i < k:
        c = rng.integers(0, 256, size=3)
        key = int(c[0]) << 16 | int(c[1]) << 8 | int(c[2])
        if key in seen:
            continue
        seen.add(key)
        out[i] = c
        i += 1
    return out


def colorize_labels(labels: np.ndarray, palette_seed: int = 0) -> np.ndarray:
    """RGBA image stack (X,Y,Z,4); background is fully transparent black."""
    k = int(labels.max()) if labels.size else 0
    lut = np.zeros((k + 1, 4), dtype=np.uint8)
    lut[1:, :3] = make_palette(k, palette_seed)
    lut[1:, 3] = 255
    return lut[labels.astype(np.int64)]


def overlay(gray: np.ndarray, labels: np.ndarray, alpha: float = 0.5, palette_seed: int = 0) -> np.ndarray:
    """Blend coloured labels over an 8-bit grayscale volume; returns RGB (X,Y,Z,3) uint8."""
    if gray.shape != labels.shape:
        raise DimensionError(f"grayscale {gray.shape} and labels {labels.shape} differ")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    rgba = colorize_labels(labels, palette_seed)
    base = np.repeat(np.asarray(gray, dtype=np.float64)[..., None], 3, axis=-1)
    a = (rgba[..., 3:] / 255.0) * alpha
    out = base * (1.0 - a) + rgba[..., :3] * a
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def write_overlay_slices(directory, rgb: np.ndarray) -> list[Path]:
    """One 8-bit RGB PNG per z-plane named slice_0001.png onward."""
    from PIL import Image

    from .volio import slice_name

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in range(rgb.shape[2]):
        p = d / f"{slice_name(z)}.png"
        Image.fromarray(np.ascontiguousarray(rgb[:, :, z].transpose(1, 0, 2)), mode="RGB").save(p)
        paths.append(p)
    return paths
