"""Deterministic random streams.

Every run derives all of its randomness from a single integer seed. Each
purpose (episode sampling, dropout masks, validation episodes, ...) gets its
own named sub-stream so that one consumer drawing more or fewer values can
never perturb another. Sub-streams are spawned from ``SeedSequence`` with a
fixed per-name key; extra integer indices (trial number, assignment number)
extend the key for per-unit generators.
"""

from __future__ import annotations

import numpy as np

STREAM_KEYS = {
    "synth": 0,
    "init": 1,
    "sampler": 2,
    "dropout": 3,
    "validation": 4,
    "protocol": 5,
}


def named_stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the sub-stream ``name`` (optionally indexed) of ``seed``."""
    if name not in STREAM_KEYS:
        raise KeyError(f"unknown stream name {name!r}; known: {sorted(STREAM_KEYS)}")
    key = (STREAM_KEYS[name], *indices)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def as_generator(seed_or_rng) -> np.random.Generator:
    """Accept either a ready generator or a plain integer seed."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
