"""Named random streams derived from one experiment seed.

Every stochastic component asks for its own generator by name. The
generator is numpy's PCG64 seeded through ``SeedSequence([seed, key])``
where ``key`` is the first 8 bytes (little endian) of ``sha256(name)``.
Streams are therefore independent of each other and of call order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), name_key(name)])))


def state_digest(generators: dict[str, np.random.Generator]) -> str:
    """sha256 over the bit-generator states, sorted by stream name."""
    h = hashlib.sha256()
    for name in sorted(generators):
        st = generators[name].bit_generator.state["state"]
        h.update(f"{name}:{st['state']}:{st['inc']};".encode())
    return h.hexdigest()
