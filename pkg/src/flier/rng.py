"""Named random streams fanned out from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError(f"seed components must be non-negative, got {value}")
    return value


def stream(root_seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(root_seed, *names)``.

    Changing one stage's name path never perturbs another stage's draws.
    """
    return np.random.default_rng(np.random.SeedSequence([_key(root_seed), *map(_key, names)]))


def derive_seed(root_seed: int, *names) -> int:
    return int(stream(root_seed, *names).integers(0, 2**31 - 1))
