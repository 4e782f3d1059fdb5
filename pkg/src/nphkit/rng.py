"""Counter-based splitmix64 random numbers.

Reproducibility contract for the simulation engine: every random draw is
addressed by (seed, counter), never by sequential generator state. The
value at counter i is

    mix64(seed + (i + 1) * GOLDEN)   (mod 2^64)

with the usual splitmix64 finalizer. Replicate r of a Monte Carlo run
draws from a substream seeded by ``derive_seed(master_seed, r)``, so any
replicate is reproducible in isolation and aggregation order cannot
change results. Uniforms map a raw word to (0,1) via

    ((z >> 11) + 0.5) * 2**-53

which is symmetric around 0.5 and can produce neither endpoint.

Two implementations, bit-identical by construction: vectorized numpy on
uint64 arrays (arrays wrap silently; numpy *scalars* would warn on
overflow, so the fallback path never uses them) and a scalar form for
use inside numba kernels.
"""

import numpy as np

from ._backend import njit

GOLDEN = 0x9E3779B97F4A7C15
_MIX_B = 0xBF58476D1CE4E5B9
_MIX_C = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_INV53 = 2.0**-53

_U64_GOLDEN = np.uint64(GOLDEN)
_U64_MIX_B = np.uint64(_MIX_B)
_U64_MIX_C = np.uint64(_MIX_C)
_U64_ONE = np.uint64(1)


def mix64(x: int) -> int:
    """Splitmix64 finalizer on Python ints. Reference/test oracle."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * _MIX_B) & _MASK
    x = ((x ^ (x >> 27)) * _MIX_C) & _MASK
    return x ^ (x >> 31)


def value_at(seed: int, counter: int) -> int:
    """Raw 64-bit word at a single counter (Python-int reference)."""
    return mix64((seed + (counter + 1) * GOLDEN) & _MASK)


def derive_seed(master_seed: int, stream: int) -> int:
    """Seed for substream `stream` (e.g. one simulation replicate)."""
    if stream < 0:
        raise ValueError("stream index must be nonnegative")
    return value_at(master_seed & _MASK, stream)


def raw64(seed: int, counters) -> np.ndarray:
    """Vectorized raw words at uint64 `counters`."""
    c = np.atleast_1d(np.asarray(counters, dtype=np.uint64))
    x = np.uint64(seed & _MASK) + (c + _U64_ONE) * _U64_GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _U64_MIX_B
    x = (x ^ (x >> np.uint64(27))) * _U64_MIX_C
    return x ^ (x >> np.uint64(31))


def uniform01(seed: int, counters) -> np.ndarray:
    """Vectorized uniforms on (0,1) at the given counters."""
    z = raw64(seed, counters)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


@njit(cache=True)
def u01(seed, counter):
    # seed, counter: np.uint64. Scalar twin of uniform01 for jitted loops.
    x = seed + (counter + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    x = x ^ (x >> np.uint64(31))
    return (np.float64(x >> np.uint64(11)) + 0.5) * 2.0**-53
