"""Counter-based random source.

Every draw is generated from ``(seed, counter)`` alone, so the full state of
the source is two integers and can be checkpointed and resumed exactly.
"""

from __future__ import annotations

import numpy as np

from . import tensor


class RandomSource:
    def __init__(self, seed: int, counter: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return gen

    def normal(self, shape) -> np.ndarray:
        return self._generator().standard_normal(shape).astype(tensor.get_dtype())

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._generator().uniform(low, high, shape).astype(tensor.get_dtype())

    def categorical(self, probs: np.ndarray) -> int:
        probs = np.asarray(probs, dtype=np.float64)
        return int(self._generator().choice(len(probs), p=probs / probs.sum()))

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, counter={self.counter})"
