"""Named, reproducible RNG sub-streams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Generator for a named sub-stream; (seed, name) fully determines the stream."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), zlib.crc32(name.encode("ascii")))))
