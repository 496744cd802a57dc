"""Counter-based pseudo-random generator used for data augmentation.

The generator is a plain SplitMix64 stream: draw ``i`` is the SplitMix64
finalizer applied to ``seed + i * GAMMA`` (all arithmetic mod 2**64).
Because each draw depends only on ``(seed, i)`` the stream is trivially
reproducible and cheap to fork. Uniform floats are ``next_u64() / 2**64``,
so they lie in ``[0, 1)``.

This is not a cryptographic generator; it exists so that augmentation
results are bit-stable across platforms and process restarts, which
``random.Random`` and NumPy's generators do not promise across versions.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """SplitMix64 finalizer (Steele, Lea, Flood 2014)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Derive an independent child seed from a base seed and an index.

    Used to give every sample its own augmentation stream:
    ``seed_i = derive_seed(seed, sample_index)``.
    """
    return _mix64(_mix64(seed) ^ _mix64((index + 1) * _GAMMA))


class CounterRng:
    """Deterministic 64-bit counter generator."""

    def __init__(self, seed: int):
        self._seed = seed & _MASK64
        self._counter = 0

    def next_u64(self) -> int:
        self._counter += 1
        return _mix64(self._seed + self._counter * _GAMMA)

    def next_float(self) -> float:
        """Uniform draw in [0, 1)."""
        return self.next_u64() / 2.0**64

    def next_index(self, n: int) -> int:
        """Uniform draw from {0, ..., n-1}."""
        if n <= 0:
            raise ValueError("next_index needs n >= 1")
        # Modulo bias is ~n / 2**64, irrelevant for the small n used here.
        return self.next_u64() % n
