"""Seeded random generators with named sub-streams.

Every random choice in the package (shuffling, parameter init, dropout,
corpus generation, negative sampling) draws from a generator obtained
here, so one run seed reproduces the whole pipeline and individual
components can be re-seeded independently.
"""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the sub-stream `name` derived from `seed`.

    The derivation is stable across processes and platforms: the name is
    hashed with SHA-256 (not Python's salted hash) and mixed into the
    seed via a SeedSequence.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    tag = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
