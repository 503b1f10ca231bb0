"""
SplitMix64 pseudo-random generator.

Every seeded operation draws from this generator so identical seeds give
identical streams on any platform. Per-sample streams come from
`derive_seed(global_seed, sample_id)`, which makes results independent of
processing order.
"""
import hashlib
import math
from typing import List, Sequence, TypeVar

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

T = TypeVar("T")


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, sample_id: str) -> int:
    """Stable 64-bit seed for one sample, independent of Python's hash salt."""
    digest = hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest()
    return mix64((seed & MASK64) ^ int.from_bytes(digest, "little"))


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, low: int, high: int) -> int:
        """Integer in [low, high] inclusive."""
        if high < low:
            raise ValueError(f"Empty range [{low}, {high}]")
        return low + self.next_u64() % (high - low + 1)

    def chance(self, p: float) -> bool:
        return p > 0.0 and self.random() < p

    def normal(self) -> float:
        u1 = max(self.random(), 1e-300)
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def random_array(self, count: int) -> np.ndarray:
        """`count` uniforms in [0, 1); same values as `count` calls to `random()`."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        bits = _mix64_array(states) >> np.uint64(11)
        return bits.astype(np.float64) * (1.0 / (1 << 53))

    def normal_array(self, count: int) -> np.ndarray:
        u = self.random_array(2 * count).reshape(2, count)
        u1 = np.maximum(u[0], 1e-300)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[1])

    def shuffled(self, items: Sequence[T]) -> List[T]:
        """Fisher-Yates shuffle of a copy."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(0, i)
            out[i], out[j] = out[j], out[i]
        return out

    def fork(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())
