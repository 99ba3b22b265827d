"""Seeded random streams.

Every source of randomness in a sample path draws from its own stream so that
enabling one consumer (for instance the shadow replay) never shifts the draws
seen by another.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# stream ids used by the simulators
INITIAL_STATE = 0
PLANT_NOISE = 1
SENSOR_NOISE = 2
ATTACK_NOISE = 3
PERTURBATION = 4
SHADOW_OFFSET = 1000


@dataclass
class RngStream:
    """A reproducible random stream identified by ``(seed, stream)``."""

    seed: int
    stream: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream < 0:
            raise ValueError("seed and stream must be non-negative")
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, stream):
        return RngStream(self.seed, stream)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def rademacher(self, size=None):
        # uniform doubles keep the draw order independent of the request shape
        return np.where(self.generator.random(size) < 0.5, -1.0, 1.0)

    def random(self, size=None):
        return self.generator.random(size)


def as_generator(rng):
    """Accept an :class:`RngStream`, a ``Generator`` or an integer seed."""
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
