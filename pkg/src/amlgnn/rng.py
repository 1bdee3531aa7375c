"""Named, splittable random streams.

Every source of randomness in the project draws from an :class:`RngStream`,
identified by an integer seed plus a path of string labels. The backing
generator is Philox4x32-10 (a counter-based generator, available in numpy as
``np.random.Philox``) keyed with the 128-bit value

    key = (seed mod 2**64, fnv1a64(path))

where ``fnv1a64`` is the 64-bit FNV-1a hash of the path labels (each label's
UTF-8 bytes followed by the separator byte 0x1F, so ``("ab",)`` and
``("a", "b")`` hash differently). Distinct paths give statistically
independent streams, and the same (seed, path) reproduces the same sequence
across processes and platforms.

A stream is a *fixed* sequence: ``generator()`` always starts from counter
zero. Callers that need fresh randomness per step derive a child stream per
step instead of reusing one generator.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_SEPARATOR = 0x1F


def fnv1a64(labels: tuple[str, ...]) -> int:
    """64-bit FNV-1a hash of a label path."""
    h = _FNV_OFFSET
    for label in labels:
        for byte in label.encode("utf-8"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
        h = ((h ^ _SEPARATOR) * _FNV_PRIME) & _MASK64
    return h


class RngStream:
    """One deterministic random sequence, addressed by (seed, path)."""

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(str(p) for p in path)

    def child(self, *labels: str) -> "RngStream":
        """Derive an independent stream by extending the path."""
        return RngStream(self.seed, self.path + tuple(str(x) for x in labels))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.array([self.seed, fnv1a64(self.path)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path)!r})"
