"""Per-component random streams derived from one master seed.

``derive_seed(master, "dataset", 7)`` hashes the component name with CRC32
and feeds ``[master, crc, *ids]`` to ``numpy.random.SeedSequence``; the first
32-bit word of its state is the derived seed.
"""
from __future__ import annotations

import zlib

import numpy as np


def component_id(name: str) -> int:
    return zlib.crc32(name.encode())


def derive_seed(master: int, component: str, *ids: int) -> int:
    ss = np.random.SeedSequence([int(master), component_id(component), *map(int, ids)])
    return int(ss.generate_state(1)[0])


def derive_rng(master: int, component: str, *ids: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, component, *ids))
