"""Deterministic random substreams.

A simulation run owns a single integer seed. Every source of randomness
(user sampling in round t, noise in round t, user k's local shuffle, ...)
draws from its own generator derived from ``(seed, *path)``, so results do
not depend on scheduling or worker count, and a run can be resumed at any
round and reproduce the remainder bit-exactly.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_words(path: tuple[int | str, ...]) -> list[int]:
    words: list[int] = []
    for part in path:
        if isinstance(part, str):
            digest = hashlib.blake2s(part.encode("utf-8"), digest_size=4).digest()
            words.append(int.from_bytes(digest, "little"))
        elif isinstance(part, (int, np.integer)):
            words.append(int(part) & 0xFFFFFFFF)
            words.append((int(part) >> 32) & 0xFFFFFFFF)
        else:
            raise TypeError(f"substream path parts must be int or str, got {part!r}")
    return words


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Return a generator for the substream identified by ``(seed, *path)``.

    The same (seed, path) always yields the same stream; distinct paths give
    independent streams. Strings are hashed with a fixed function, so streams
    are stable across processes and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + _path_words(path)
    return np.random.default_rng(np.random.SeedSequence(entropy))
