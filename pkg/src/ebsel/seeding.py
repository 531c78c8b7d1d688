"""Named random substreams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_seed(seed: int, *names) -> int:
    """Stable 32-bit seed for the substream ``names`` of ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(_key(n) for n in names)])
    return int(ss.generate_state(1)[0])


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
