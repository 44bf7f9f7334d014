"""Seeded randomness for the CLI.

Everything random flows from one 64-bit seed through a Philox4x32-10
counter-based bit generator (numpy's Philox, keyed directly with the seed
rather than routed through SeedSequence). Gaussian draws use numpy's
ziggurat standard_normal on that stream. Identical seeds therefore give
identical artifacts; commands draw in a documented fixed order so outputs
stay byte-reproducible.
"""

import numpy as np

_U64 = (1 << 64) - 1


def make_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & _U64))
