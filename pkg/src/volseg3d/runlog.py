"""Line-delimited JSON loss logs and run manifests shared by the training stages."""

from __future__ import annotations

import json
import math
from pathlib import Path


def _encode(record: dict) -> str:
    # repr-exact floats, stable key order: two identical runs give identical bytes
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


class LossLog:
    """Append-only JSONL writer; ``path=None`` keeps records in memory only."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict) -> None:
        for k, v in record.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"refusing to log non-finite {k}={v}")
        self.records.append(dict(record))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(_encode(record) + "\n")

    def __len__(self):
        return len(self.records)


def read_loss_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_manifest(path, manifest: dict) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return p
