"""Seeded random streams.

Every stream is a Philox4x64 counter-based generator keyed by a
``SeedSequence``. Ensemble members derive their key from
``(master_seed, seed_index)`` through the SeedSequence spawn tree, so
member ``i`` sees the same stream no matter how the ensemble is scheduled.
"""
from __future__ import annotations

import numpy as np

#: block size used when streaming uniforms into compiled kernels
CHUNK = 1 << 16


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def member_rng(master_seed: int, index: int) -> np.random.Generator:
    """Generator for member ``index`` of the ensemble keyed by ``master_seed``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(seq))


def member_seed(master_seed: int, index: int) -> int:
    """A plain integer seed that reproduces ``member_rng(master_seed, index)``'s key."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
