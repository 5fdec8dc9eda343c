"""Dense-array helpers, seeded RNG and stable primitives.

Arrays are plain ``numpy.ndarray``. Computation runs in float64; the
checkpoint format stores float32. Randomness comes from numpy's PCG64 bit
generator, whose output stream is fixed across platforms for a given seed.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, MaskingError, PreconditionError

MAX_RANK = 4


def as_real_array(x, max_rank: int = MAX_RANK) -> np.ndarray:
    """Validate external input: float64 copy, rank bound, finite values only."""
    arr = np.array(x, dtype=np.float64)
    if arr.ndim > max_rank:
        raise DimensionError(f"rank {arr.ndim} exceeds {max_rank}")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError("array contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(a) -> np.ndarray:
    """Softmax over the last axis with row-max subtraction.

    ``-inf`` entries are allowed (masked positions get weight 0), but a row
    made entirely of ``-inf`` has no defined distribution and raises.
    """
    a = np.asarray(a, dtype=np.float64)
    row_max = np.max(a, axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise MaskingError("softmax row has every entry masked")
    e = np.exp(a - row_max)
    return e / np.sum(e, axis=-1, keepdims=True)


class Rng:
    """Seedable PCG64 stream (numpy's ``PCG64`` bit generator).

    Normals are drawn by numpy's ziggurat transform of the same uniform
    stream, so a given seed yields the same values on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, dims, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=tuple(dims))

    def normal(self, dims) -> np.ndarray:
        return self._gen.standard_normal(size=tuple(dims))

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, offset: int) -> "Rng":
        return Rng(self.seed * 1_000_003 + offset)


def rand_uniform(rng: Rng, dims) -> np.ndarray:
    return rng.uniform(dims)


def rand_normal(rng: Rng, dims) -> np.ndarray:
    return rng.normal(dims)


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -bound, bound)
