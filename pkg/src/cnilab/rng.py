"""Named, counter-based random streams split from a single run seed.

Each consumer (a noise site, the batch shuffler, an attack's random start)
asks for its stream by name.  Streams are Philox generators keyed by the run
seed and a CRC of the name, so the values a consumer sees depend only on the
seed, its name and how much it has drawn, never on the interleaving with
other consumers or threads.
"""
from __future__ import annotations

import zlib

import numpy as np


class SeedStreams:
    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            key = zlib.crc32(name.encode("utf-8"))
            seq = np.random.SeedSequence(self.seed, spawn_key=(key,))
            gen = np.random.Generator(np.random.Philox(seq))
            self._streams[name] = gen
        return gen

    def spawn(self, name: str) -> "SeedStreams":
        """Derive an independent family of streams (e.g. one per sweep point)."""
        child_seed = int(self.stream("spawn:" + name).integers(0, 2**63 - 1))
        return SeedStreams(child_seed)

    def get_state(self) -> dict:
        return {
            "seed": self.seed,
            "streams": {name: _jsonable(gen.bit_generator.state) for name, gen in sorted(self._streams.items())},
        }

    @classmethod
    def from_state(cls, state: dict) -> "SeedStreams":
        obj = cls(state["seed"])
        for name, bg_state in state["streams"].items():
            obj.stream(name).bit_generator.state = _restore(bg_state)
        return obj

    def __repr__(self):
        return f"SeedStreams(seed={self.seed}, streams={sorted(self._streams)})"


def _jsonable(state):
    # Philox keeps its counter/key/buffer as uint64 arrays
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__uint64__": [int(v) for v in state]}
    if isinstance(state, np.integer):
        return int(state)
    return state


def _restore(state):
    if isinstance(state, dict):
        if "__uint64__" in state:
            return np.array(state["__uint64__"], dtype=np.uint64)
        return {k: _restore(v) for k, v in state.items()}
    return state


def as_streams(rng) -> SeedStreams:
    """Accept ``None``, an int seed or an existing :class:`SeedStreams`."""
    if isinstance(rng, SeedStreams):
        return rng
    if rng is None:
        return SeedStreams(0)
    return SeedStreams(int(rng))
