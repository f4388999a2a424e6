"""Reproducible counter-based random streams.

Every stochastic call site in the simulator draws from its own stream keyed
by (base seed, node id, global iteration, purpose).  Streams are independent
of the order in which they are opened, so worker passes can run in any order
(or in parallel) without changing results.
"""

from __future__ import annotations

import zlib

import numpy as np

_PURPOSES = {
    "init": 0,
    "downlink": 1,
    "uplink": 2,
    "batch": 3,
    "probe": 4,
    "data": 5,
}


def _purpose_code(purpose: str) -> int:
    # Fixed codes for the hot paths, stable CRC for anything else.
    if purpose in _PURPOSES:
        return _PURPOSES[purpose]
    return 16 + zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, node: int = 0, global_iter: int = 0, purpose: str = "") -> np.random.Generator:
    """Open the generator for one (seed, node, iteration, purpose) call site."""
    key = (int(node), int(global_iter), _purpose_code(purpose))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
