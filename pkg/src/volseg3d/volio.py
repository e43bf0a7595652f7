"""Volume persistence and 1-based subvolume indexing.

Arrays are held in memory as numpy arrays of shape (X, Y, Z), indexed
``v[x, y, z]``. On disk the payload is linearized z-major with x fastest,
``index = z*X*Y + y*X + x``, which is Fortran order for an (X, Y, Z) array.

Raw format: ``<name>.vol`` (little-endian payload) plus ``<name>.volmeta``
(JSON sidecar with dims, dtype, byte order, voxel order and semantic tag).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, DimensionError, FormatError

DTYPES = {
    "uint8": np.dtype("<u1"),
    "uint16": np.dtype("<u2"),
    "uint32": np.dtype("<u4"),
    "float32": np.dtype("<f4"),
}
TAGS = ("orig", "label", "syn", "seg", "prob")
ORDER = "z-major"


@dataclass
class Volume:
    data: np.ndarray
    tag: str = "orig"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"a volume must be 3D, got shape {self.data.shape}")
        if self.tag not in TAGS:
            raise FormatError(f"unknown semantic tag {self.tag!r}; expected one of {TAGS}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".vol", ".volmeta"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".vol"), p.with_name(p.name + ".volmeta")


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if arr.dtype == dt.newbyteorder("="):
            return name
    if arr.dtype == np.bool_:
        return "uint8"
    raise FormatError(f"unsupported voxel dtype {arr.dtype}; supported: {sorted(DTYPES)}")


def write_volume(path, volume, tag: str | None = None) -> Path:
    """Write ``volume`` (a :class:`Volume` or an (X,Y,Z) array). Returns the payload path."""
    if not isinstance(volume, Volume):
        volume = Volume(np.asarray(volume), tag or "orig")
    elif tag is not None:
        volume = Volume(volume.data, tag)
    name = _dtype_name(volume.data)
    payload_path, meta_path = _paths(path)
    payload_path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.asarray(volume.data).astype(DTYPES[name], copy=False).tobytes(order="F")
    meta = {
        "dims": list(volume.dims),
        "dtype": name,
        "byte_order": "little",
        "order": ORDER,
        "tag": volume.tag,
    }
    payload_path.write_bytes(raw)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return payload_path


def read_meta(path) -> dict:
    _, meta_path = _paths(path)
    if not meta_path.exists():
        raise FormatError(f"metadata sidecar {meta_path} is missing")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable metadata in {meta_path}: {exc}") from exc
    missing = {"dims", "dtype", "byte_order", "order", "tag"} - meta.keys()
    if missing:
        raise FormatError(f"{meta_path} lacks keys {sorted(missing)}")
    if meta["dtype"] not in DTYPES or meta["byte_order"] != "little" or meta["order"] != ORDER:
        raise FormatError(f"{meta_path} declares an unsupported layout: {meta}")
    return meta


def read_volume(path) -> Volume:
    payload_path, _ = _paths(path)
    meta = read_meta(path)
    dims = tuple(int(n) for n in meta["dims"])
    dt = DTYPES[meta["dtype"]]
    raw = payload_path.read_bytes()
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise CorruptFileError(
            f"{payload_path}: expected {expected} bytes for dims {dims} {meta['dtype']}, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dt).reshape(dims, order="F").astype(dt.newbyteorder("="))
    return Volume(data, meta["tag"])


def slice_name(z: int) -> str:
    """Zero-padded 1-based slice file stem."""
    return f"slice_{z + 1:04d}"


def write_image_stack(directory, volume: np.ndarray) -> list[Path]:
    """One 8-bit grayscale PNG per z-plane; image width is X and height is Y."""
    from PIL import Image

    arr = np.asarray(volume)
    if arr.dtype != np.uint8:
        raise FormatError(f"image stacks hold 8-bit voxels, got {arr.dtype}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for z in range(arr.shape[2]):
        p = d / f"{slice_name(z)}.png"
        Image.fromarray(np.ascontiguousarray(arr[:, :, z].T), mode="L").save(p)
        out.append(p)
    return out


def read_image_stack(directory) -> np.ndarray:
    from PIL import Image

    d = Path(directory)
    files = sorted(f for f in os.listdir(d) if f.startswith("slice_"))
    if not files:
        raise FormatError(f"no slice_* images in {d}")
    planes = []
    for f in files:
        with Image.open(d / f) as im:
            planes.append(np.asarray(im.convert("L")).T)
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise CorruptFileError(f"slices in {d} have differing sizes {sorted(shapes)}")
    return np.stack(planes, axis=2)


def _check_bounds(lo: int, hi: int, n: int, axis: str) -> None:
    if not (1 <= lo <= hi <= n):
        raise IndexError(f"{axis} bounds {lo}:{hi} invalid for size {n} (1-based, inclusive)")


def crop_subvolume(v: np.ndarray, q: tuple[int, int], r: tuple[int, int], p: tuple[int, int]) -> np.ndarray:
    """Return ``v[q_i:q_f, r_i:r_f, p_i:p_f]`` with 1-based inclusive bounds."""
    for (lo, hi), n, axis in zip((q, r, p), v.shape, "xyz"):
        _check_bounds(lo, hi, n, axis)
    return v[q[0] - 1: q[1], r[0] - 1: r[1], p[0] - 1: p[1]].copy()


def embed_subvolume(v: np.ndarray, sub: np.ndarray, corner: tuple[int, int, int]) -> np.ndarray:
    """Write ``sub`` into a copy of ``v`` with its first voxel at 1-based ``corner``."""
    out = v.copy()
    for lo, m, n, axis in zip(corner, sub.shape, v.shape, "xyz"):
        _check_bounds(lo, lo + m - 1, n, axis)
    q, r, p = corner
    out[q - 1: q - 1 + sub.shape[0], r - 1: r - 1 + sub.shape[1], p - 1: p - 1 + sub.shape[2]] = sub
    return out
