"""Deterministic RNG sub-stream derivation.

One master 64-bit seed fully determines every random draw in a run.
Sub-streams for the signal noise, the observation noise, particle systems,
ensemble replicas, etc. are derived through numpy's SeedSequence with a
(stream-tag, index) spawn key, so

    substream(seed, tag, index)

is reproducible, and distinct (tag, index) pairs give statistically
independent generators.
"""

from __future__ import annotations

import numpy as np

# Registry of stream tags. Values are arbitrary but frozen: changing them
# changes every simulated path.
STREAM_TAGS = {
    "init": 1,          # initial state draw X_0 ~ prior
    "signal": 2,        # signal Brownian increments dV
    "observation": 3,   # observation Brownian increments dW
    "particles": 4,     # particle-filter propagation / resampling
    "prior": 5,         # unconditioned prior ensembles
    "replica": 6,       # per-replica master seeds in ensemble experiments
    "resample": 7,      # stand-alone resampling operations
    "checkpoint": 8,    # checkpoint cloud reduction
}


def _seed_sequence(seed: int, tag: str, index: int) -> np.random.SeedSequence:
    if tag not in STREAM_TAGS:
        raise KeyError(f"unknown stream tag {tag!r}; known: {sorted(STREAM_TAGS)}")
    return np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                  spawn_key=(STREAM_TAGS[tag], int(index)))


def substream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Return the generator for (seed, tag, index)."""
    return np.random.default_rng(_seed_sequence(seed, tag, index))


def sub_seed(seed: int, tag: str, index: int = 0) -> int:
    """Collapse (seed, tag, index) to a single 64-bit sub-seed.

    Used where a derived run needs its own master seed (e.g. ensemble
    replicas), so the replica is itself reproducible in isolation.
    """
    return int(_seed_sequence(seed, tag, index).generate_state(1, np.uint64)[0])
