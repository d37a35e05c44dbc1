"""Bindings for dropping pathology corruptions into training pipelines.

Thin in-process wrappers around the omnice library: enumerate the
corruption pool, corrupt single arrays, and sample (kind, severity) pairs
for augmentation chains.  Every call is pure and deterministic under its
seed, so training workers can share nothing.
"""

from __future__ import annotations

import numpy as np

import omnice
from omnice.pipeline import corrupt_one
from omnice.severity import (
    DEFAULT_TABLE,
    KINDS,
    SEVERITIES,
    CorruptionSpec,
)

__version__ = omnice.__version__

__all__ = ["list_corruptions", "corrupt", "random_op", "__version__"]


def list_corruptions() -> list[dict]:
    """The 21 corruption kinds with their severity and parameter schema.

    Each entry carries the kind identifier, the valid severity levels and
    the level-1/level-5 endpoint of every interpolated parameter plus any
    fixed parameters.
    """
    out = []
    for kind in KINDS:
        parameters = {
            name: {"level1": rng.level1, "level5": rng.level5}
            for name, rng in DEFAULT_TABLE.ranges[kind].items()
        }
        fixed = dict(DEFAULT_TABLE.fixed.get(kind, {}))
        out.append(
            {
                "kind": kind,
                "severities": list(SEVERITIES),
                "parameters": parameters,
                "fixed": fixed,
            }
        )
    return out


def corrupt(image, kind: str, severity: int, seed: int) -> np.ndarray:
    """Apply one corruption to an (H, W, 3) uint8 array.

    The caller's array is never mutated; the result is a new array with
    the same shape.  Output matches the batch pipeline byte for byte for
    identical (image, kind, severity, seed).
    """
    arr = np.ascontiguousarray(image)
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    return corrupt_one(arr, CorruptionSpec(kind, severity, seed))


def random_op(rng_seed: int, pool=KINDS):
    """Uniform (kind, severity) sampler over ``pool`` x the 5 levels.

    Returns a zero-argument callable holding its own generator state, so
    interleaved samplers with different seeds produce exactly the
    sequences they would produce standalone.
    """
    pool = tuple(pool)
    if not pool:
        raise ValueError("op pool must be nonempty")
    for kind in pool:
        if kind not in KINDS:
            raise ValueError(
                f"unknown corruption kind {kind!r}; valid kinds: {', '.join(KINDS)}"
            )
    rng = np.random.default_rng(np.uint64(rng_seed))

    def sample() -> tuple[str, int]:
        kind = pool[int(rng.integers(0, len(pool)))]
        severity = int(rng.integers(SEVERITIES[0], SEVERITIES[-1] + 1))
        return kind, severity

    return sample
