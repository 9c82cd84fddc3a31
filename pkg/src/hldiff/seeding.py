"""Master-seed fan-out to named substreams.

Every stochastic component (split, init, noise, sampler, dropout, ...) pulls
from its own named stream, so toggling one component never perturbs the draws
of another. Stream seeds are derived from (master_seed, crc32(name)), which is
stable across processes and platforms (no salted builtin hash).
"""

import zlib

import numpy as np
import torch


def derive_seed(master: int, name: str) -> int:
    """64-bit stream seed for `name` under `master`."""
    ss = np.random.SeedSequence([master & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class SeedStreams:
    """Named, independently seeded RNG streams under one master seed.

    `generator(name)` returns the stream's persistent torch CPU generator;
    repeated calls with the same name return the same object, so consumption
    advances the stream. `fresh_generator`/`numpy_rng` return newly seeded
    objects for callers that want a stream reset to its origin.
    """

    def __init__(self, master: int):
        self.master = int(master)
        self._torch: dict[str, torch.Generator] = {}

    def generator(self, name: str) -> torch.Generator:
        g = self._torch.get(name)
        if g is None:
            g = torch.Generator(device="cpu")
            g.manual_seed(derive_seed(self.master, name))
            self._torch[name] = g
        return g

    def fresh_generator(self, name: str) -> torch.Generator:
        g = torch.Generator(device="cpu")
        g.manual_seed(derive_seed(self.master, name))
        return g

    def numpy_rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.master, name))
