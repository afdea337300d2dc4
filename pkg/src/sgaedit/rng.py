"""Named, reproducible random streams.

Every source of randomness in the pipeline is a sub-stream derived from one
root seed plus a stream name ("codebook", "mask", "guide-sample",
"candidate-3", ...). Streams are independent of each other and stable across
runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for the sub-stream `name` of the root `seed`."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    # Two 64-bit words of the name hash plus the seed form the entropy pool.
    words = [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), *words]))
