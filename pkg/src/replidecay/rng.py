"""Seed derivation and random streams.

Every replica gets its own Philox (counter-based) generator keyed by a
64-bit seed derived from ``(master_seed, replica_index)`` with splitmix64.
Adding replicas therefore never perturbs existing ones.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Per-replica seed: splitmix64 applied to the master seed, then mixed with the index."""
    return splitmix64(splitmix64(master_seed & _MASK64) ^ (index & _MASK64))


def make_rng(master_seed: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_seed(master_seed, index)))


def choose_outside(rng: np.random.Generator, n: int, excluded) -> int:
    """Uniform draw from ``{0..n-1} minus excluded`` using a single uniform.

    ``excluded`` must be a subset of ``range(n)`` smaller than ``n``.
    """
    ex = sorted(excluded)
    r = int(rng.random() * (n - len(ex)))
    for e in ex:
        if r >= e:
            r += 1
        else:
            break
    return r
