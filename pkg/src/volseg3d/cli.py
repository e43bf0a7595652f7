"""Command-line driver for the pipeline stages.

Every subcommand reads its inputs from disk, writes its outputs into
``--out`` and leaves a ``run_manifest.json`` describing the run.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config, to_dict
from .errors import (
    ConfigError,
    CorruptFileError,
    DimensionError,
    FormatError,
    GenerationError,
    GeometryError,
    ModelError,
    NonFiniteError,
    OptimizerError,
    ParameterError,
)
from .runlog import write_manifest
from .volio import read_volume, write_volume

log = logging.getLogger("volseg3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
_EXIT_FOR = (
    ((ConfigError, ModelError, ParameterError), EXIT_CONFIG),
    ((NonFiniteError, OptimizerError), EXIT_NUMERIC),
    ((DimensionError, GeometryError, FormatError, CorruptFileError, GenerationError, FileNotFoundError), EXIT_DATA),
)


class OutputExists(ConfigError):
    pass


# ------------------------------------------------------------------ helpers
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise OutputExists(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _volume_files(path) -> list[Path]:
    """A single volume path, or every ``*.vol`` in a directory (sorted)."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.vol"))
        if not files:
            raise FileNotFoundError(f"no volumes (*.vol) found in {p}")
        return files
    payload = p if p.suffix == ".vol" else p.with_name(p.name + ".vol")
    if not payload.exists():
        raise FileNotFoundError(f"volume {payload} does not exist")
    return [payload]


def _load(path) -> np.ndarray:
    return read_volume(path).data


def _run_manifest(out: Path, command: str, cfg: PipelineConfig, args, started: float, extra=None) -> None:
    manifest = {
        "command": command,
        "arguments": json.loads(json.dumps({k: v for k, v in vars(args).items() if k != "func"}, default=str)),
        "seed": cfg.seed,
        "config": to_dict(cfg),
        "versions": {
            "volseg3d": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    write_manifest(out / "run_manifest.json", manifest)


# ------------------------------------------------------------------ subcommands
def cmd_synth_labels(args, cfg: PipelineConfig) -> dict:
    from .synthgen import PROFILES, binarize, generate_binary_volume, volume_seed

    out = _prepare_out(args.out, args.force)
    sc = cfg.synthgen
    if args.profile:
        sc = dataclasses.replace(sc, axis_range=PROFILES[args.profile])
    entries = []
    for i in range(args.count):
        seed = volume_seed(sc.seed, i)
        vol = binarize(generate_binary_volume(dataclasses.replace(sc, seed=seed)))
        path = write_volume(out / f"label_{i + 1:04d}", vol, tag="label")
        entries.append({"name": path.stem, "seed": seed, "sha256": _sha256(path)})
    write_manifest(out / "manifest.json", {"synthgen": to_dict(sc), "volumes": entries})
    return {"volumes": len(entries)}


def cmd_simulate_microscopy(args, cfg: PipelineConfig) -> dict:
    from .synthgen import render_fluorescence

    out = _prepare_out(args.out, args.force)
    files = _volume_files(args.labels)
    for i, f in enumerate(files):
        img = render_fluorescence(_load(f), np.random.default_rng([cfg.seed, i]))
        write_volume(out / f"orig_{i + 1:04d}", img, tag="orig")
    return {"volumes": len(files)}


def cmd_train_spcyclegan(args, cfg: PipelineConfig) -> dict:
    from .gantrain import train_spcyclegan

    out = _prepare_out(args.out, args.force)
    gc = cfg.gantrain
    if args.iterations is not None:
        gc = dataclasses.replace(gc, iterations=args.iterations)
    labels = [_load(f) for f in _volume_files(args.labels)]
    real = [_load(f) for src in args.real for f in _volume_files(src)]
    res = train_spcyclegan(gc, labels, real, out)
    last = res.log.records[-1] if res.log.records else {}
    return {"iterations": gc.iterations, "final_losses": last}


def cmd_gen_microscopy(args, cfg: PipelineConfig) -> dict:
    from .gantrain import generate_synthetic
    from .networks import load_checkpoint

    g = load_checkpoint(args.model, expect_role="G")
    out = _prepare_out(args.out, args.force)
    files = _volume_files(args.labels)
    for f in files:
        stem = f.stem.replace("label_", "syn_", 1) if f.stem.startswith("label_") else f"syn_{f.stem}"
        write_volume(out / stem, generate_synthetic(g, _load(f)), tag="syn")
    return {"volumes": len(files)}


def cmd_train_unet(args, cfg: PipelineConfig) -> dict:
    from .segtrain import prepare_training_set, train_unet

    out = _prepare_out(args.out, args.force)
    sc = cfg.segtrain
    if args.epochs is not None:
        sc = dataclasses.replace(sc, epochs=args.epochs)
    if args.max_steps is not None:
        sc = dataclasses.replace(sc, max_steps=args.max_steps)
    label_files, syn_files = _volume_files(args.labels), _volume_files(args.syn)
    if len(label_files) != len(syn_files):
        raise DimensionError(f"{len(label_files)} label volumes but {len(syn_files)} synthetic volumes")
    pairs = prepare_training_set([_load(f) for f in label_files], [_load(f) for f in syn_files], sc.block_size)
    res = train_unet(sc, pairs, out)
    return {"pairs": len(pairs), "steps": len(res.log), "best_loss": res.best_loss if res.log.records else None}


def cmd_segment(args, cfg: PipelineConfig) -> dict:
    from .infer import segment_volume
    from .networks import load_checkpoint

    m = load_checkpoint(args.model, expect_role="M")
    out = _prepare_out(args.out, args.force)
    ic = cfg.infer
    threshold = ic.threshold if args.threshold is None else args.threshold
    v = _load(_volume_files(args.input)[0])
    res = segment_volume(m, v, threshold=threshold, batch_size=ic.batch_size, workers=ic.workers)
    write_volume(out / "prob", res.prob.astype(np.float32), tag="prob")
    write_volume(out / "seg", res.seg, tag="seg")
    return {"dims": list(v.shape), "foreground_voxels": int(res.seg.sum())}


def cmd_postprocess(args, cfg: PipelineConfig) -> dict:
    from .postproc import component_sizes, connected_components_3d, remove_small_components

    out = _prepare_out(args.out, args.force)
    pc = cfg.postproc
    min_size = pc.min_size if args.min_size is None else args.min_size
    conn = pc.connectivity if args.connectivity is None else args.connectivity
    seg = _load(_volume_files(args.input)[0])
    labels = remove_small_components(connected_components_3d(seg, conn), min_size)
    write_volume(out / "labels", labels, tag="seg")
    write_volume(out / "seg_clean", (labels > 0).astype(np.uint8), tag="seg")
    sizes = component_sizes(labels)[1:].tolist()
    write_manifest(out / "components.json", {"count": len(sizes), "sizes": sizes, "min_size": min_size, "connectivity": conn})
    return {"components": len(sizes)}


def cmd_evaluate(args, cfg: PipelineConfig) -> dict:
    from .postproc import compute_metrics

    out = _prepare_out(args.out, args.force)
    seg = _load(_volume_files(args.seg)[0])
    gt = _load(_volume_files(args.gt)[0])
    report = compute_metrics(seg, gt)
    report.write(out / "metrics.json")
    print(
        f"accuracy {float(report.accuracy):.4%}  type-I {float(report.type1):.4%}  type-II {float(report.type2):.4%}"
    )
    return report.as_dict()


def cmd_overlay(args, cfg: PipelineConfig) -> dict:
    from .postproc import overlay, write_overlay_slices

    out = _prepare_out(args.out, args.force)
    gray = _load(_volume_files(args.gray)[0])
    labels = _load(_volume_files(args.labels)[0])
    if gray.dtype != np.uint8:
        gray = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    paths = write_overlay_slices(out, overlay(gray, labels, args.alpha, cfg.seed))
    return {"slices": len(paths)}


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON pipeline configuration")
    common.add_argument("--seed", type=int, help="global seed; overrides every stage seed")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="volseg3d", description="3D nuclei segmentation pipeline")
    p.add_argument("--version", action="version", version=f"volseg3d {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-labels", parents=[common], help="generate synthetic binary nuclei volumes")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--profile", choices=("data1", "data2"))
    s.set_defaults(func=cmd_synth_labels)

    s = sub.add_parser("simulate-microscopy", parents=[common], help="render stand-in microscopy from label volumes")
    s.add_argument("--labels", type=Path, required=True)
    s.set_defaults(func=cmd_simulate_microscopy)

    s = sub.add_parser("train-spcyclegan", parents=[common], help="train G, F, H, D1, D2 on unpaired volumes")
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--real", type=Path, required=True, nargs="+")
    s.add_argument("--iterations", type=int)
    s.set_defaults(func=cmd_train_spcyclegan)

    s = sub.add_parser("gen-microscopy", parents=[common], help="synthesize microscopy from labels with model G")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--labels", type=Path, required=True)
    s.set_defaults(func=cmd_gen_microscopy)

    s = sub.add_parser("train-unet", parents=[common], help="train the segmentation U-Net (model M)")
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--syn", type=Path, required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=cmd_train_unet)

    s = sub.add_parser("segment", parents=[common], help="tiled segmentation of a volume with model M")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("postprocess", parents=[common], help="connected components and small-object removal")
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--min-size", type=int)
    s.add_argument("--connectivity", type=int, choices=(6, 18, 26))
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("evaluate", parents=[common], help="voxel accuracy and Type-I/II errors")
    s.add_argument("--seg", type=Path, required=True)
    s.add_argument("--gt", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("overlay", parents=[common], help="colour-coded label overlay as PNG slices")
    s.add_argument("--gray", type=Path, required=True)
    s.add_argument("--labels", type=Path, required=True)
    s.add_argument("--alpha", type=float, default=0.5)
    s.set_defaults(func=cmd_overlay)
    return p


def _exit_code(exc: BaseException) -> int | None:
    for types, code in _EXIT_FOR:
        if isinstance(exc, types):
            return code
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        summary = args.func(args, cfg)
        _run_manifest(Path(args.out), args.command, cfg, args, started, {"summary": summary})
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"volseg3d {args.command}: error: {exc}", file=sys.stderr)
        return code
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - started)
    print(json.dumps({"command": args.command, **summary}, default=str))
    return EXIT_OK
