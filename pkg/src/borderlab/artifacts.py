"""Output files of a run and the manifest that records them.

Bulk data goes to CSV (header row, '.' decimal, shortest round-trip floats);
summaries go to JSON with sorted keys. Each written file is hashed the way git
hashes a blob, so identical runs can be compared by manifest alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from threading import Lock
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)


def git_blob_sha1(data: bytes) -> str:
    """SHA-1 of 'blob <size>\\0' + data, as `git hash-object` computes it."""
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def jsonable(value: Any) -> Any:
    """Convert numpy values and non-finite floats into plain JSON values."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, np.generic):
        return jsonable(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def _cell(value: Any) -> str:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ArtifactRecord:
    """One written file."""

    name: str
    path: Path
    sha1: str
    size: int


class ArtifactRegistry:
    """Thread-safe writer and registry of the files produced by one run."""

    def __init__(self, out_dir: str | Path) -> None:
        self.out_dir = Path(out_dir)
        self._records: dict[str, ArtifactRecord] = {}
        self._lock = Lock()

    def _write(self, name: str, data: bytes) -> ArtifactRecord:
        path = self.out_dir / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as e:
            raise IOFailure(f"cannot write {path}: {e.strerror or e}") from e
        record = ArtifactRecord(name=name, path=path, sha1=git_blob_sha1(data), size=len(data))
        with self._lock:
            self._records[name] = record
        logger.debug("Wrote %s (%d bytes, %s)", path, record.size, record.sha1[:12])
        return record

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> ArtifactRecord:
        buffer = io.StringIO()
        writer = csv.writer(buffer)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        return self._write(name, buffer.getvalue().encode())

    def write_json(self, name: str, data: Any) -> ArtifactRecord:
        text = json.dumps(jsonable(data), indent=2, sort_keys=True, allow_nan=False)
        return self._write(name, (text + "\n").encode())

    def records(self) -> list[ArtifactRecord]:
        """Records in name order."""
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def count(self) -> int:
        with self._lock:
            return len(self._records)


class OutputEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    sha1: str = Field(pattern=r"^[0-9a-f]{40}$")
    size: int = Field(ge=0)


class Manifest(BaseModel):
    """Reproducibility record of a run."""

    model_config = ConfigDict(extra="forbid")

    package: str = "borderlab"
    version: str
    run_id: str
    command: str
    seed: int
    config: dict[str, Any]
    outputs: list[OutputEntry]
    wall_time: float = Field(ge=0)


class IOFailure(Exception):
    """An output file could not be written."""

    pass
