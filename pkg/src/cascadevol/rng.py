"""Deterministic, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, block)``.  Paths are simulated in fixed-size blocks, so results do
not depend on how many workers process the blocks or in which order.
"""

import zlib

import numpy as np

DEFAULT_BLOCK = 65536


def stage_seed(root_seed, stage):
    """Derive a reproducible per-stage seed from a root seed and a stage name."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=(zlib.crc32(stage.encode("utf-8")),))
    return int(ss.generate_state(1, np.uint32)[0])


def block_rng(seed, block=0):
    """Philox generator for block ``block`` of the stream identified by ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n, block_size=DEFAULT_BLOCK):
    """Yield ``(index, start, stop)`` for consecutive blocks covering ``range(n)``."""
    for index, start in enumerate(range(0, n, block_size)):
        yield index, start, min(start + block_size, n)
