"""Named, splittable random streams.

Every source of randomness in a run is derived from one master seed plus a
stream name (and optional integer keys such as step and sample index), so
consuming one stream never perturbs another and any step can be replayed
in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("patch-drop", "text-mask", "init", "data-order")


def _name_words(name: str) -> tuple[int, ...]:
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=16).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


def stream_rng(master_seed: int, name: str, *keys: int) -> np.random.Generator:
    """A generator for (seed, name, keys), independent of all other tuples."""
    entropy = (int(master_seed),) + _name_words(name) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


class RngStreams:
    """Holds one persistent generator per named stream plus keyed derivation.

    The persistent generators serve sequential draws (e.g. dataset order);
    ``derive`` builds a fresh generator keyed by integers (e.g. step and
    sample index) for replayable per-item randomness.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._gens = {name: stream_rng(self.master_seed, name) for name in STREAMS}

    def stream(self, name: str) -> np.random.Generator:
        return self._gens[name]

    def derive(self, name: str, *keys: int) -> np.random.Generator:
        if name not in STREAMS:
            raise KeyError(f"unknown rng stream {name!r}")
        return stream_rng(self.master_seed, name, *keys)

    def state_of(self, name: str):
        return self._gens[name].bit_generator.state
