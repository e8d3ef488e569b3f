"""Deterministic random stream derivation.

Every stochastic step in the simulator (device sampling, channel fading,
batch shuffling, probabilistic quantization, ...) pulls from its own
generator, keyed by the experiment seed plus a small integer path. Streams
are therefore independent of execution order and of how many worker
threads are running.
"""

from __future__ import annotations

import numpy as np

# Stream path tags. Keep values stable: they are part of what makes a seed
# reproduce a run.
DEVICES = 1
DATASET = 2
PARTITION = 3
INIT = 4
CHANNELS = 5
BUDGET = 6
TRAIN = 7
QUANT = 8
CALIBRATE = 9


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for the stream identified by (seed, *path)."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *path))))
