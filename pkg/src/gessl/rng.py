"""Deterministic random-stream derivation.

Every stochastic component draws from a stream keyed by (master seed,
purpose, *indices). Streams are independent counter-based Philox
generators, so tasks, samples, and heads can be generated in any order --
or in parallel -- with bit-identical results.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(master_seed: int, *key: int | str) -> np.random.Generator:
    """Return the generator identified by ``(master_seed, *key)``.

    String key parts (purposes such as ``"augment"``) are hashed with
    crc32 so they stay stable across runs and platforms; integer parts
    (episode, task, sample indices) are used as-is and must be >= 0.
    """
    parts = []
    for part in key:
        if isinstance(part, str):
            parts.append(zlib.crc32(part.encode("utf-8")))
        else:
            value = int(part)
            if value < 0:
                raise ValueError(f"stream key parts must be non-negative, got {value}")
            parts.append(value)
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(parts))
    return np.random.Generator(np.random.Philox(seq))
