"""Random sub-stream derivation.

Every random draw in the package comes from a generator built by
``substream(root_seed, *keys)``.  The keys name the consumer, e.g.

    substream(seed, "init")                  parameter initialisation
    substream(seed, "batch", it)             shape sampling at iteration ``it``
    substream(seed, "walk", it, slot)        training walk ``slot`` of iteration ``it``
    substream(seed, "infer", shape_pos)      inference walks of one shape
    substream(seed, "walks", ordinal)        walk ``ordinal`` of ``generate_walks``

Keys are hashed into a numpy SeedSequence, so streams with different keys are
statistically independent and each one is replayable in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"negative sub-stream key {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def seed_sequence(root_seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key_to_int(root_seed), *(_key_to_int(k) for k in keys)])


def substream(root_seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(root_seed, *keys)))
