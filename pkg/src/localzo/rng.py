"""Seeded random streams.

Every consumer of randomness takes an explicit ``numpy.random.Generator``.
Streams for independent purposes (weight init, data order, z-sampling,
Monte-Carlo shards) are derived from one integer seed through
``SeedSequence`` spawn keys, so they never overlap and never depend on
the order in which they are created.
"""

import numpy as np

RngStream = np.random.Generator

_PURPOSES = {
    "init": 0,
    "data": 1,
    "zo": 2,
    "synth": 3,
    "mc": 4,
}


def stream(seed, purpose=None, *key):
    """Return a generator for ``seed`` and an optional named purpose.

    >>> a = stream(0, "zo"); b = stream(0, "zo")
    >>> float(a.random()) == float(b.random())
    True
    """
    spawn_key = ()
    if purpose is not None:
        if isinstance(purpose, str):
            purpose = _PURPOSES[purpose]
        spawn_key = (int(purpose),) + tuple(int(k) for k in key)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


def shards(seed, n):
    """Independent generators for ``n`` Monte-Carlo shards of one task."""
    return [stream(seed, "mc", i) for i in range(n)]
