"""Seed-derivation tree.

Every random stream in a run descends from the single run seed. A stream is
addressed by a path of components, e.g. ``("online", "episode", 7, "plan")``.
String components are hashed with CRC-32, integers are used as-is, and the
resulting tuple becomes the ``spawn_key`` of a :class:`numpy.random.SeedSequence`
rooted at the run seed. Two different paths never share a stream, and the same
path always reproduces the same stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"negative seed-path component: {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *path: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) & (2**63 - 1),
                                  spawn_key=tuple(_key(p) for p in path))


def rng(seed: int, *path: int | str) -> np.random.Generator:
    """Generator for the stream at ``path`` under ``seed``."""
    return np.random.default_rng(seed_sequence(seed, *path))


def child_seed(seed: int, *path: int | str) -> int:
    """A plain integer seed for APIs that take ints (63-bit)."""
    return int(seed_sequence(seed, *path).generate_state(1, dtype=np.uint64)[0] >> 1)
