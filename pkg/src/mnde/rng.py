"""Deterministic per-purpose random streams derived from one run seed.

Every stochastic stage (parameter init, batch shuffling, corruption
injection, synthetic generation) draws from its own named substream, so
changing one stage never perturbs the others.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError

_STREAMS = {
    "init": 101,
    "shuffle": 102,
    "missing": 103,
    "zeros": 104,
    "synth": 105,
}


def substream(seed: int, name: str) -> np.random.Generator:
    if name not in _STREAMS:
        raise ConfigError(f"unknown RNG stream {name!r}; expected one of {sorted(_STREAMS)}")
    return np.random.default_rng([int(seed), _STREAMS[name]])
