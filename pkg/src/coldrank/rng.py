"""Named, seedable random streams.

Every random draw in the harness flows from a single integer seed through
named child streams. A child stream is identified by the seed plus a tuple of
string labels ("bench"/"user"/<user_id>, "shuffle"/<task>, ...); its PCG64
state is derived from SHA-256 over that identity. Streams are therefore
independent of each other and of the order in which they are created, which
makes parallel suite construction order-independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_rng(seed: int, *labels: object) -> np.random.Generator:
    """Return a PCG64 generator for the stream named by ``labels``."""
    key = ":".join([str(int(seed))] + [str(lab) for lab in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))


def child_seed(seed: int, *labels: object) -> int:
    """A derived 63-bit integer seed for the stream named by ``labels``."""
    key = ":".join([str(int(seed))] + [str(lab) for lab in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
