"""SplitMix64 random source.

The generator is fully specified so that dropout masks and batch orders can be
replayed by any implementation:

    state <- (state + 0x9E3779B97F4A7C15) mod 2**64
    z <- state
    z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   mod 2**64
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB   mod 2**64
    output z ^ (z >> 31)

Derived draws:

* ``uniform()``      = (next_u64() >> 11) * 2**-53, in [0, 1)
* ``below(n)``       = rejection sampling of next_u64() against the largest
                       multiple of n not exceeding 2**64, then ``x % n``
* ``permutation(n)`` = Fisher-Yates, i from n-1 down to 1, swap i with below(i+1)
* ``bernoulli_keep(n, p)`` = [uniform() >= p for each of n channels]

Bulk Gaussian draws (initialisation, synthetic data) go through
``numpy_generator()``, which seeds a NumPy PCG64 from one ``next_u64()``.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SeededRng:
    __slots__ = ("seed", "state")

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= _MASK:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self.state = seed

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def bernoulli_keep(self, n: int, p: float) -> np.ndarray:
        return np.array([self.uniform() >= p for _ in range(n)], dtype=bool)

    def numpy_generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.next_u64()))

    def spawn(self) -> "SeededRng":
        """Independent child stream seeded from this one."""
        return SeededRng(self.next_u64())

    def get_state(self) -> int:
        return self.state

    def set_state(self, state: int) -> None:
        self.state = int(state) & _MASK

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, state={self.state})"
