"""
Reproducible random streams.

Streams use the counter-based Philox generator keyed on (seed, stream_id), so
a chain or group always sees the same sequence regardless of which worker
runs it or in what order.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ('seed', 'stream_id'):
            value = getattr(self, name)
            if not 0 <= int(value) <= _MASK64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self):
        """Fresh numpy Generator positioned at the start of this stream."""
        key = (int(self.stream_id) << 64) | int(self.seed)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, index):
        """Derived stream for sub-task ``index`` (e.g. one chain or one group)."""
        digest = hashlib.blake2b(
            f"{self.stream_id}:{index}".encode(), digest_size=8
        ).digest()
        return RngState(self.seed, int.from_bytes(digest, 'little'))

    def spawn(self, count):
        return [self.child(i) for i in range(count)]


def make_generator(seed, stream_id=0):
    return RngState(seed, stream_id).generator()
