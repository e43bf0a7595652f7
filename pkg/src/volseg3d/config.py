"""Pipeline configuration: JSON files mapped onto the stage dataclasses."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gantrain import GanTrainConfig
from .segtrain import SegTrainConfig
from .synthgen import SynthConfig


@dataclass
class InferConfig:
    threshold: float = 0.5
    batch_size: int = 1
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be positive")


@dataclass
class PostprocConfig:
    min_size: int = 100
    connectivity: int = 26

    def __post_init__(self):
        if self.min_size < 0:
            raise ConfigError(f"min_size must be non-negative, got {self.min_size}")
        if self.connectivity not in (6, 18, 26):
            raise ConfigError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")


@dataclass
class PipelineConfig:
    seed: int = 0
    synthgen: SynthConfig = field(default_factory=SynthConfig)
    gantrain: GanTrainConfig = field(default_factory=GanTrainConfig)
    segtrain: SegTrainConfig = field(default_factory=SegTrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy whose stage seeds all follow the global seed."""
        return PipelineConfig(
            seed=seed,
            synthgen=dataclasses.replace(self.synthgen, seed=seed),
            gantrain=dataclasses.replace(self.gantrain, seed=seed),
            segtrain=dataclasses.replace(self.segtrain, seed=seed),
            infer=self.infer,
            postproc=self.postproc,
        )


def from_dict(cls, data: dict, where: str = "config"):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys at every level."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {}
    for key, value in data.items():
        t = hints[key]
        if dataclasses.is_dataclass(t) and isinstance(t, type):
            kwargs[key] = from_dict(t, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> PipelineConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {p} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    cfg = from_dict(PipelineConfig, data)
    # a top-level seed propagates unless a stage sets its own
    if "seed" in data:
        for name in ("synthgen", "gantrain", "segtrain"):
            if "seed" not in data.get(name, {}):
                setattr(cfg, name, dataclasses.replace(getattr(cfg, name), seed=cfg.seed))
    return cfg
