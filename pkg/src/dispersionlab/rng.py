"""Deterministic, schedule-independent random streams.

Every random draw in the library flows from a counter-based Philox generator
keyed by (seed, *tags). Tags are strings or integers naming the consumer
(subcommand, variant, sequence length, trial index), so any (n, trial) cell
of a sweep can be reproduced in isolation and results do not depend on
execution order or thread schedule.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode())


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Philox generator keyed by the seed and a tuple of naming tags."""
    key = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
