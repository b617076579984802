"""Shared utilities for borderlab experiments.

Provides common functionality for all simulation modules:
- Run ID generation for log correlation
- Worker count resolution from the environment
- Monte Carlo estimates carried with their error bars
- Chunked path ensembles whose results do not depend on the worker count
"""

from __future__ import annotations

import logging
import os
import secrets
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

# Default worker count (can be overridden per-run)
DEFAULT_WORKERS = 1

# Paths per chunk; fixed so that chunk i always draws from the i-th spawned seed
CHUNK_SIZE = 2048

# Two-sided 95% normal quantile
Z95 = 1.959963984540054


def gen_run_id() -> str:
    """Generate a 6-character hex run ID for log correlation."""
    return secrets.token_hex(3)


def get_workers() -> int:
    """Get worker count from environment or default."""
    workers_str = os.getenv("BORDERLAB_WORKERS")
    if workers_str:
        try:
            workers = int(workers_str)
            if workers >= 1:
                return workers
        except ValueError:
            pass
        logger.warning("Invalid BORDERLAB_WORKERS value: %s", workers_str)
    return DEFAULT_WORKERS


@dataclass
class Estimate:
    """Monte Carlo mean with its standard error."""

    mean: float
    std_error: float
    n: int

    @classmethod
    def from_samples(cls, values: np.ndarray) -> Estimate:
        """Build an estimate from i.i.d. per-path values."""
        values = np.asarray(values, dtype=float).ravel()
        n = values.size
        if n == 0:
            raise NumericError("Cannot estimate from an empty sample")
        mean = float(np.mean(values))
        std_error = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(mean=mean, std_error=std_error, n=n)

    @property
    def ci95(self) -> tuple[float, float]:
        half = Z95 * self.std_error
        return (self.mean - half, self.mean + half)

    def to_dict(self) -> dict[str, Any]:
        low, high = self.ci95
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "n": self.n,
            "ci95": [low, high],
        }


def as_seed_sequence(seed: int | np.random.SeedSequence) -> np.random.SeedSequence:
    """Wrap an integer seed; pass SeedSequences through."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def chunk_sizes(n_paths: int, chunk_size: int = CHUNK_SIZE) -> list[int]:
    """Split n_paths into fixed-size chunks (last one may be short)."""
    if n_paths <= 0:
        raise NumericError(f"n_paths must be positive, got {n_paths}")
    full, rest = divmod(n_paths, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def run_chunked(
    simulate: Callable[[np.random.SeedSequence, int], Any],
    n_paths: int,
    seed: int | np.random.SeedSequence,
    *,
    workers: int | None = None,
    chunk_size: int = CHUNK_SIZE,
) -> list[Any]:
    """Run a path simulator over seed-stable chunks.

    Chunk i always receives the i-th child of the root seed, and results come back
    in chunk order, so the outcome is identical for any worker count.

    Args:
        simulate: Called as simulate(chunk_seed, chunk_paths).
        n_paths: Total number of paths.
        seed: Root seed.
        workers: Thread count. Defaults to BORDERLAB_WORKERS.
        chunk_size: Paths per chunk.

    Returns:
        Per-chunk results in chunk order.
    """
    sizes = chunk_sizes(n_paths, chunk_size)
    children = as_seed_sequence(seed).spawn(len(sizes))
    workers = workers or get_workers()

    if workers == 1 or len(sizes) == 1:
        return [simulate(child, size) for child, size in zip(children, sizes, strict=True)]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(simulate, children, sizes))


def concat_chunks(chunks: list[Any]) -> Any:
    """Concatenate per-chunk arrays or tuples of arrays along the path axis."""
    if isinstance(chunks[0], tuple):
        return tuple(np.concatenate(parts, axis=0) for parts in zip(*chunks, strict=True))
    return np.concatenate(chunks, axis=0)


def as_points(x: Any, dimension: int) -> tuple[np.ndarray, bool]:
    """Coerce a point or batch of points to shape (M, N).

    Returns the batch and whether the input was a single point.
    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.shape[-1] != dimension:
        raise NumericError(f"Expected points of dimension {dimension}, got shape {arr.shape}")
    return arr, single


class NumericError(Exception):
    """Base error for numerical failures in borderlab."""

    pass
