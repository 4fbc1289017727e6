from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Seeded PCG64 generator for a named sub-stream.

    `stream` is a tuple of non-negative integers (for instance `(STREAM_FOLDS, fold_idx)`), fed
    to `SeedSequence.spawn_key`, so two different streams of the same master seed never overlap
    and a stream never depends on how many workers consume its siblings.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=stream)))


def derive_seed(seed: int, *stream: int) -> int:
    """Integer seed for libraries that only take an `int` (e.g. scipy QMC scrambling)."""
    state = np.random.SeedSequence(seed, spawn_key=stream).generate_state(1, dtype=np.uint32)
    return int(state[0])


def floats_to_hex(values: Iterable[float]) -> list[str]:
    return [float(v).hex() for v in values]


def floats_from_hex(values: Sequence[str]) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64)
