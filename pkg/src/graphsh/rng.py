"""Seedable counter-based random streams.

Every random draw in the package goes through :func:`make_rng`, which builds
a numpy ``Generator`` on the Philox-4x64 counter-based bit generator keyed by
``SeedSequence([seed, *stream])``. Distinct ``stream`` tuples give statistically
independent streams, so e.g. the dropout masks of iteration ``i`` are
``make_rng(seed, STREAM_DROPOUT, i)`` regardless of what ran before.
"""

from __future__ import annotations

import numpy as np

STREAM_INIT = 1
STREAM_DROPOUT = 2
STREAM_SHUFFLE = 3
STREAM_SYNTH = 4


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))
