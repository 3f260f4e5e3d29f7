"""Named random streams derived from one integer seed.

``stream(seed, "itn-init")`` and ``stream(seed, "pairs")`` are independent,
and adding a new purpose string never shifts an existing stream.
"""

import hashlib

import numpy as np


def stream_seed(seed: int, purpose: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}:{purpose}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, purpose))
