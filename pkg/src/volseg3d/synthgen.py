"""Synthetic binary nuclei volumes built from randomly placed, randomly oriented ellipsoids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError

# boundary voxels whose quadratic form rounds to 1 + O(1e-16) still count as inside
_INSIDE_TOL = 1e-9


@dataclass(frozen=True)
class EllipsoidSpec:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        if r.shape != (3, 3):
            raise ConfigError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ConfigError("rotation must be orthonormal with determinant +1")
        if min(self.semi_axes) <= 0:
            raise ConfigError(f"semi-axes must be positive, got {self.semi_axes}")


@dataclass
class SynthConfig:
    volume_dims: tuple[int, int, int] = (128, 128, 128)
    count_range: tuple[int, int] = (15, 40)
    axis_range: tuple[float, float] = (4.0, 10.0)
    overlap_allowed: bool = False
    max_placement_attempts: int = 100
    seed: int = 0

    def __post_init__(self):
        self.volume_dims = tuple(int(n) for n in self.volume_dims)
        self.count_range = tuple(int(n) for n in self.count_range)
        self.axis_range = tuple(float(a) for a in self.axis_range)
        if len(self.volume_dims) != 3 or min(self.volume_dims) < 1:
            raise ConfigError(f"volume_dims must be three positive ints, got {self.volume_dims}")
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise ConfigError(f"count_range must satisfy 0 <= min <= max, got {self.count_range}")
        alo, ahi = self.axis_range
        if alo <= 0 or alo > ahi:
            raise ConfigError(f"axis_range must satisfy 0 < min <= max, got {self.axis_range}")
        if self.max_placement_attempts < 1:
            raise ConfigError("max_placement_attempts must be at least 1")


# nucleus-size profiles; they differ only in the semi-axis range
PROFILES = {
    "data1": (4.0, 10.0),
    "data2": (3.0, 7.0),
}


def profile_config(name: str, **overrides) -> SynthConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return SynthConfig(axis_range=PROFILES[name], **overrides)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_ellipsoid(cfg: SynthConfig, rng: np.random.Generator) -> EllipsoidSpec:
    axes = rng.uniform(cfg.axis_range[0], cfg.axis_range[1], size=3)
    margin = axes.max()
    center = []
    for n in cfg.volume_dims:
        lo, hi = margin, n - 1 - margin
        if hi < lo:  # volume smaller than the nucleus: fall back to the whole axis
            lo, hi = 0.0, n - 1.0
        center.append(rng.uniform(lo, hi))
    return EllipsoidSpec(tuple(center), tuple(axes), random_rotation(rng))


def ellipsoid_mask(spec: EllipsoidSpec, dims) -> tuple[tuple[slice, ...], np.ndarray]:
    """Bounding-box slices (clipped to ``dims``) and the in-box boolean voxel mask."""
    r = np.asarray(spec.rotation, dtype=float)
    a = np.asarray(spec.semi_axes, dtype=float)
    c = np.asarray(spec.center, dtype=float)
    # half-extent along each axis of the rotated ellipsoid
    ext = np.sqrt((r * r) @ (a * a))
    lo = np.maximum(np.floor(c - ext).astype(int), 0)
    hi = np.minimum(np.ceil(c + ext).astype(int) + 1, np.asarray(dims))
    if np.any(hi <= lo):
        return tuple(slice(0, 0) for _ in range(3)), np.zeros((0, 0, 0), dtype=bool)
    grids = np.meshgrid(*(np.arange(l, h, dtype=float) - cc for l, h, cc in zip(lo, hi, c)), indexing="ij")
    d = np.stack(grids, axis=-1)
    local = d @ r  # coordinates in the principal-axis frame, i.e. R^T (v - c)
    q = ((local / a) ** 2).sum(axis=-1)
    box = tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))
    return box, q <= 1.0 + _INSIDE_TOL


def rasterize_ellipsoid(spec: EllipsoidSpec, volume: np.ndarray, label: int = 1) -> np.ndarray:
    """Set voxels whose centers lie inside the ellipsoid to ``label`` (in place)."""
    if label <= 0:
        raise ConfigError(f"label must be positive, got {label}")
    box, mask = ellipsoid_mask(spec, volume.shape)
    volume[box][mask] = label
    return volume


def generate_nuclei(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, list[EllipsoidSpec]]:
    """Like :func:`generate_binary_volume` but also returns the placed ellipsoids."""
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    dtype = np.uint8 if cfg.count_range[1] < 256 else np.uint32
    vol = np.zeros(cfg.volume_dims, dtype=dtype)
    placed: list[EllipsoidSpec] = []
    for _ in range(count):
        for _attempt in range(cfg.max_placement_attempts):
            spec = sample_ellipsoid(cfg, rng)
            box, mask = ellipsoid_mask(spec, cfg.volume_dims)
            if not mask.any():
                continue
            region = vol[box]
            if not cfg.overlap_allowed and region[mask].any():
                continue
            region[mask] = len(placed) + 1
            placed.append(spec)
            break
    if count > 0 and not placed:
        raise GenerationError(
            f"no nucleus could be placed in {cfg.max_placement_attempts} attempts per nucleus"
        )
    return vol, placed


def generate_binary_volume(cfg: SynthConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Label volume with one distinct positive integer per nucleus; 0 is background."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return generate_nuclei(cfg, rng)[0]


def binarize(labels: np.ndarray) -> np.ndarray:
    return (labels > 0).astype(np.uint8)


def volume_seed(base_seed: int, index: int) -> int:
    return int(base_seed) + int(index)


def generate_batch(cfg: SynthConfig, n: int) -> list[np.ndarray]:
    """``n`` label volumes, volume ``i`` drawn with seed ``cfg.seed + i``."""
    return [generate_binary_volume(cfg, np.random.default_rng(volume_seed(cfg.seed, i))) for i in range(n)]


def render_fluorescence(
    labels: np.ndarray,
    rng: np.random.Generator,
    blur_sigma: float = 1.2,
    background: float = 20.0,
    intensity_range: tuple[float, float] = (120.0, 220.0),
    noise_std: float = 12.0,
) -> np.ndarray:
    """Crude fluorescence rendering of a label volume (blur + per-nucleus brightness + noise).

    Stands in for acquired microscopy when no real volumes are available.
    """
    from scipy.ndimage import gaussian_filter

    n = int(labels.max())
    levels = np.concatenate([[0.0], rng.uniform(*intensity_range, size=n)])
    img = levels[labels.astype(np.int64)]
    img = gaussian_filter(img, blur_sigma) + background
    img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
