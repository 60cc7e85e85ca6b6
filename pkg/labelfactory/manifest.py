""" Run manifest: config snapshot, per-stage traces, checksums and metrics """

import hashlib
import json
import logging
import os
import random
import time

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
import torch

LOG = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"

STATUS_PENDING = "pending"
STATUS_RUNNING = "running"
STATUS_COMPLETED = "completed"
STATUS_RESUMED = "resumed"
STATUS_STALE = "stale"
STATUS_FAILED = "failed"


def stage_seed(seed: int, stage: str) -> int:
    """ Seed for one stage, derived from the run seed and the stage name only """
    digest = hashlib.blake2b(f"{seed}:{stage}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFF


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def dataset_checksum(directory: Path) -> str:
    """ sha256 over every file name and its bytes, in sorted name order """
    digest = hashlib.sha256()
    for path in sorted(Path(directory).rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(directory).as_posix().encode("utf-8"))
            digest.update(path.read_bytes())
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class StageRecord:
    name: str
    status: str = STATUS_PENDING
    seed: Optional[int] = None
    traces: dict[str, list[float]] = field(default_factory=dict)
    final_loss: Optional[float] = None
    metrics: dict[str, Any] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    error: Optional[str] = None

    def record_traces(self, traces: dict[str, list[float]], final_key: Optional[str] = None) -> None:
        self.traces.update(traces)
        key = final_key or next(iter(traces), None)
        if key is not None and traces.get(key):
            self.final_loss = traces[key][-1]


@dataclass
class RunManifest:
    config: dict = field(default_factory=dict)
    stages: dict[str, StageRecord] = field(default_factory=dict)
    checksums: dict[str, str] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)
    created_at: str = field(default_factory=_now)
    updated_at: Optional[str] = None

    def stage(self, name: str) -> StageRecord:
        if name not in self.stages:
            self.stages[name] = StageRecord(name)
        return self.stages[name]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunManifest":
        stages = {name: StageRecord(**record) for name, record in raw.get("stages", {}).items()}
        return cls(
            config=raw.get("config", {}),
            stages=stages,
            checksums=raw.get("checksums", {}),
            metrics=raw.get("metrics", {}),
            created_at=raw.get("created_at", _now()),
            updated_at=raw.get("updated_at"),
        )

    def save(self, path: Path) -> None:
        """ Atomic write: readers see the old or the new manifest, never half of one """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.updated_at = _now()
        tmp_path = path.with_suffix(path.suffix + ".tmp")
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, allow_nan=True)
        os.replace(tmp_path, path)
        LOG.debug("Saved manifest to %s", path)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            LOG.error("Manifest %s does not exist", path)
            raise FileNotFoundError(f"Manifest {path} does not exist")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@contextmanager
def track_stage(manifest: RunManifest, name: str, path: Optional[Path] = None,
                seed: Optional[int] = None) -> Iterator[StageRecord]:
    """
    Mark a stage running, time it, and save the manifest when it ends.
    Failures are recorded on the stage before the exception propagates.
    """
    record = manifest.stage(name)
    record.status = STATUS_RUNNING
    record.seed = seed
    record.error = None
    record.started_at = _now()
    start = time.perf_counter()
    LOG.info("=" * 60)
    LOG.info("Stage %s started", name)
    try:
        yield record
    except Exception as e:
        record.status = STATUS_FAILED
        record.error = str(e)
        LOG.error("Stage %s failed: %s", name, e)
        raise
    else:
        if record.status == STATUS_RUNNING:
            record.status = STATUS_COMPLETED
        LOG.info("Stage %s %s", name, record.status)
    finally:
        record.wall_clock_s = time.perf_counter() - start
        record.finished_at = _now()
        if path is not None:
            manifest.save(path)
