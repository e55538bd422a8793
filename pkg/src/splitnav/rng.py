"""Deterministic random streams.

One root seed fans out into named substreams so that, for example, changing
the number of training episodes cannot perturb world generation.  Streams
are derived as SeedSequence([root, crc32(name), *indices]); equal inputs
give bitwise-equal streams on every platform.
"""
from __future__ import annotations

import zlib

import numpy as np

# Canonical substream names used across the package.
STREAM_WORLD = "world"
STREAM_INIT = "init"
STREAM_RL = "rl"
STREAM_CHANNEL = "channel"
STREAM_DATA = "data"
STREAM_EVAL = "eval"


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the PCG64 generator for a named substream of ``root_seed``.

    ``indices`` distinguishes sequential uses of the same stream (episode
    number, sample number, ...).
    """
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    tag = zlib.crc32(name.encode("utf-8"))
    seq = np.random.SeedSequence([root_seed, tag, *indices])
    return np.random.Generator(np.random.PCG64(seq))
