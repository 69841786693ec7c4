"""Seeded randomness: inverse-CDF token draws and a uniform-draw source.

Every stochastic decision in the package goes through a :class:`RandomSource`
so that the exact-enumeration oracle can substitute a branching source that
walks all outcomes instead of drawing one.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np


class UniformGenerator(Protocol):
    def random(self) -> float: ...


def sample_token(dist: Sequence[float] | np.ndarray, rng: UniformGenerator) -> int:
    """Draw a token by inverse CDF over ids in ascending order.

    Consumes exactly one uniform from ``rng``. Token ``i`` is returned for the
    first ``i`` whose cumulative mass exceeds ``u``, so zero-mass tokens are
    never returned.
    """
    u = float(rng.random())
    cdf = np.cumsum(np.asarray(dist, dtype=np.float64))
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= len(cdf):
        # u landed above a total that rounded below 1
        positive = np.flatnonzero(np.asarray(dist) > 0)
        idx = int(positive[-1])
    return idx


class RandomSource:
    """Uniform draws from a numpy ``Generator`` plus the two decision kinds
    the decoders need: categorical token draws and Bernoulli acceptances."""

    def __init__(self, seed: int | np.random.Generator | None = None):
        if isinstance(seed, np.random.Generator):
            self.generator = seed
        else:
            self.generator = np.random.default_rng(seed)

    def random(self) -> float:
        return float(self.generator.random())

    def token(self, dist: Sequence[float] | np.ndarray) -> int:
        return sample_token(dist, self)

    def bernoulli(self, prob: float) -> tuple[bool, float | None]:
        """Return ``(u < prob, u)``; always consumes one uniform."""
        u = self.random()
        return u < prob, u


def as_source(rng: RandomSource | np.random.Generator | int | None) -> RandomSource:
    if isinstance(rng, RandomSource):
        return rng
    return RandomSource(rng)
