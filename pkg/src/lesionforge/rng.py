"""Seedable random number generation.

Every stochastic operation in the toolkit draws from a Philox-backed
``numpy.random.Generator``. Philox is a counter-based design whose stream
is identical across platforms and numpy builds, which is what makes the
seeded tests bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int | np.random.Generator) -> np.random.Generator:
    """Return a platform-stable Generator for ``seed``.

    Passing an existing Generator returns it unchanged, so functions can
    accept either a seed or a live stream.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_seed(rng: np.random.Generator) -> int:
    """Draw a child seed from ``rng`` for a replayable sub-operation."""
    return int(rng.integers(0, 2**63 - 1))
