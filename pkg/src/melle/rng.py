"""Counter-based random streams.

Each draw builds a Philox generator keyed by the 64-bit seed with the call
counter placed in the high word of the 256-bit Philox counter, so every
(seed, counter) pair owns a disjoint block of the stream and the sequence is
identical on every platform numpy supports.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autograd import DEFAULT_DTYPE, Tensor

_MASK64 = (1 << 64) - 1


@dataclass
class RngState:
    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed, counter=np.array([0, 0, 0, self.counter], dtype=np.uint64))
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(bitgen)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self._generator().standard_normal(shape, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, shape) -> np.ndarray:
        return self._generator().random(shape)

    def split(self, *tags) -> "RngState":
        """Independent child stream named by ``tags``; does not advance this one."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.seed.to_bytes(8, "little"))
        h.update(self.counter.to_bytes(8, "little"))
        for tag in tags:
            h.update(b"\x00" + str(tag).encode())
        return RngState(int.from_bytes(h.digest(), "little"))

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)


def gaussian_draw(rng: RngState, shape, dtype=DEFAULT_DTYPE) -> Tensor:
    """i.i.d. N(0, 1) tensor; advances ``rng.counter`` by one."""
    return Tensor(rng.normal(shape, dtype=dtype))
