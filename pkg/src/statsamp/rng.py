"""Seeded random streams.

Every stream in the package is derived from a master seed with
:class:`numpy.random.SeedSequence`, using a tuple ``spawn_key`` to name the
consumer.  The splitting rule for chain groups is::

    SeedSequence(master_seed, spawn_key=(STREAM_CHAINS, group_index))

so a group's draws never depend on how many threads process the groups.
"""

import numpy as np

STREAM_CHAINS = 0
STREAM_INIT = 1
STREAM_REFERENCE = 2
STREAM_TRAIN = 3
STREAM_EVAL = 4


def substream(seed, *keys):
    """Return a Generator for the stream named by ``keys`` under ``seed``."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(seq))
