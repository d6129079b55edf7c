"""Splittable, reproducible random number streams.

Every stochastic routine in this package takes an explicit RngStream.  A
stream is identified by a (seed, stream_id) pair; the same pair always
reproduces the same draw sequence, independent of thread layout or call
order elsewhere.  Distinct stream_ids index statistically independent
Philox streams, so replicas can be fanned out without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngStream"]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Handle for one reproducible random stream."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    def generator(self) -> np.random.Generator:
        """Fresh Generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def substream(self, k: int) -> "RngStream":
        """Derived independent stream; k scopes draws within one consumer.

        The id mixing is a fixed odd-multiplier hash so that substream
        lattices of different parents do not collide for small k.
        """
        mixed = (self.stream_id * 0x9E3779B97F4A7C15 + 0x632BE59BD9B4E019 + k) & _MASK64
        return RngStream(self.seed, mixed)

    def replica(self, index: int) -> "RngStream":
        """Stream for replica `index` of a batch rooted at this stream."""
        return RngStream(self.seed, (self.stream_id + index) & _MASK64)
