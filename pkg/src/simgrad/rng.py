"""Deterministic random streams with keyed substreams."""
from __future__ import annotations

import numpy as np


class RandomSource:
    """Family of independent PCG64 streams derived from one integer seed.

    ``stream(*key)`` returns a fresh generator determined only by
    ``(seed, key)``: the same seed and key always reproduce the same
    sequence, on every platform, regardless of which other streams were
    drawn before.  Optimizers key streams by ``(epoch, step, replicate)``
    so that independent replicates can run in any order (or in parallel)
    without changing results.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(int(k) for k in key)
        )
        return np.random.default_rng(ss)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed})"
