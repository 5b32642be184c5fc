"""Named RNG substreams derived from a single run seed.

Each component (world, init, batching, ...) draws from its own stream,
so changing one component's usage never shifts another's randomness.
"""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator keyed by (seed, name), stable across processes."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
