"""Named, reproducible random streams.

All randomness derives from one integer root seed. A stream is identified by
the root seed plus a path of names/integers, e.g. ``("train", "dropout", 17)``.
Names are hashed with CRC-32 so the mapping is stable across processes and
Python versions; the generator is numpy's PCG64 seeded through ``SeedSequence``.
"""
from __future__ import annotations

import zlib

import numpy as np


def _word(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream indices must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path: str | int) -> np.random.Generator:
    """Return an independent generator for ``path`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_word(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
