"""Deterministic, counter-based random streams.

Every draw is a pure function of ``(seed, counter)``: each call instantiates a
Philox generator keyed on the seed with the call counter in the high counter
word, so sequences are reproducible across runs, platforms, and resume points.
Checkpointing a stream only needs the two integers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def derive_seed(seed: int, *tags: object) -> int:
    """Derive a child seed from a parent seed and a label path.

    Uses SHA-256 rather than ``hash()`` so derivation is stable across
    interpreter runs and machines.
    """
    text = ":".join([str(int(seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RngStream:
    """A resumable random stream identified by (seed, counter)."""

    seed: int
    counter: int = 0

    def _next(self) -> np.random.Generator:
        # Counter goes in the top 64-bit word: consecutive calls get streams
        # 2**192 draws apart, so one call can never run into the next.
        ctr = np.array([0, 0, 0, self.counter], dtype=np.uint64)
        bg = np.random.Philox(key=self.seed % (1 << 64), counter=ctr)
        self.counter += 1
        return np.random.Generator(bg)

    def spawn(self, *tags: object) -> "RngStream":
        """Independent child stream; does not advance this stream."""
        return RngStream(derive_seed(self.seed, *tags))

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return self._next().normal(0.0, std, size=shape).astype(dtype)

    def uniform(self, low: float, high: float, shape, dtype=np.float64) -> np.ndarray:
        return self._next().uniform(low, high, size=shape).astype(dtype)

    def random(self, shape) -> np.ndarray:
        """Uniform [0, 1) in float64 (used for dropout masks)."""
        return self._next().random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)

    def state(self) -> dict:
        return {"seed": int(self.seed), "counter": int(self.counter)}

    @staticmethod
    def from_state(state: dict) -> "RngStream":
        return RngStream(int(state["seed"]), int(state["counter"]))
