"""Counter-based noise streams.

Every Gaussian draw is addressed by ``(seed, replicate, step, role)``; the
generator for an address is a Philox bit generator keyed from those four
integers, so a draw never depends on the order in which other addresses were
consumed. Particle ``i`` always receives row ``i`` of the block drawn for its
address, and rows are prefix-stable: asking for more particles never changes
the rows of the first ones.
"""

from __future__ import annotations

import enum

import numpy as np


class Role(enum.IntEnum):
    """Which noise a stream feeds."""

    INIT = 0
    XI = 1
    ETA = 2
    TRUTH_INIT = 10
    TRUTH_XI = 11
    TRUTH_ETA = 12
    BOOTSTRAP = 20


class NoiseStreams:
    """Factory of replayable standard-normal blocks for one master seed."""

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = seed

    def generator(self, replicate: int, step: int, role: Role) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed, int(replicate), int(step), int(role)])
        return np.random.Generator(np.random.Philox(ss))

    def standard_normal(self, replicate: int, step: int, role: Role, n: int, dim: int) -> np.ndarray:
        """``(n, dim)`` block of iid N(0, 1) draws for the given address."""
        return self.generator(replicate, step, role).standard_normal((n, dim))

    def gaussian(self, replicate, step, role, n, chol):
        """``(n, d)`` draws from N(0, L L^T) where ``chol`` is the lower factor L."""
        z = self.standard_normal(replicate, step, role, n, chol.shape[0])
        return z @ chol.T

    def __repr__(self):
        return f"NoiseStreams(seed={self.seed})"
