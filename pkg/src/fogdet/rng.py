"""Deterministic, named random streams.

Every stochastic component draws from a generator derived from the run seed
plus a path of string tags, so adding a new consumer never perturbs the
streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive(seed: int, *tags: str) -> np.random.Generator:
    """Return a Generator keyed by (seed, tags...).

    The same (seed, tags) pair always yields an identical stream; distinct
    tag paths are independent for practical purposes.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(tag.encode())
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.PCG64(key))
