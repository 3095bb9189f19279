"""Named, splittable random streams on top of the Philox counter-based generator.

Every stochastic component receives its own substream, addressed by a path of
names under a single run seed.  Identical (seed, path) pairs always produce
identical draws, independent of call order elsewhere in the program, which is
what makes whole runs bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class Stream:
    """One addressable random stream: a run seed plus a name path."""

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = path

    def child(self, name: str) -> "Stream":
        """Derive the substream addressed by `name` under this stream."""
        return Stream(self.seed, self.path + (str(name),))

    def generator(self) -> np.random.Generator:
        """Fresh generator for this stream; same (seed, path) -> same draws."""
        key = _fnv1a64("/".join(self.path))
        return np.random.Generator(np.random.Philox(key=(self.seed & _MASK64, key)))

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={'/'.join(self.path)!r})"
