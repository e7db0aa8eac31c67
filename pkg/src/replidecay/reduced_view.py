"""Per-server reduced states, empirical measures and distances between them."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .sim_core import NetworkState


def reduce(state: NetworkState) -> np.ndarray:
    """(N, d) array whose row i is (R_{i,1}, ..., R_{i,d})."""
    return state.reduced()


@dataclass
class DiscreteMeasure:
    """Finitely supported probability measure on N^d, stored sparsely."""

    weights: dict[tuple[int, ...], float]
    dim: int

    def __post_init__(self):
        for r, w in self.weights.items():
            if len(r) != self.dim:
                raise ValueError(f"support point {r} has wrong dimension")
            if w < 0:
                raise ValueError("negative weight")

    @property
    def total(self) -> float:
        return float(sum(self.weights.values()))

    def evaluate(self, f) -> float:
        """Integral of the test function ``f`` (called on a tuple)."""
        return float(sum(w * f(r) for r, w in self.weights.items()))

    def to_sparse(self) -> list:
        return [[list(r), w] for r, w in sorted(self.weights.items())]

    def to_json(self) -> str:
        return json.dumps(self.to_sparse())

    @classmethod
    def from_sparse(cls, items, dim=None) -> "DiscreteMeasure":
        weights = {tuple(int(v) for v in r): float(w) for r, w in items}
        if dim is None:
            dim = len(next(iter(weights))) if weights else 0
        return cls(weights, dim)

    @classmethod
    def from_grid(cls, q: np.ndarray, cutoff: float = 0.0) -> "DiscreteMeasure":
        """Measure from a dense d-dimensional probability array (entries <= cutoff dropped)."""
        idx = np.argwhere(q > cutoff)
        return cls({tuple(int(v) for v in r): float(q[tuple(r)]) for r in idx}, q.ndim)


@dataclass
class EmpiricalMeasure(DiscreteMeasure):
    n_servers: int = 0


def empirical_measure(reduced: np.ndarray) -> EmpiricalMeasure:
    """Normalized counting measure of the rows of ``reduced``."""
    reduced = np.asarray(reduced)
    n = reduced.shape[0]
    counts = Counter(map(tuple, reduced.tolist()))
    return EmpiricalMeasure({r: c / n for r, c in counts.items()}, reduced.shape[1], n)


class Distance(NamedTuple):
    tv: float
    bl: float


def measure_distance(a: DiscreteMeasure, b: DiscreteMeasure) -> Distance:
    """Total-variation and bounded-Lipschitz distances.

    TV is exact: half the l1 distance of the weight vectors.  BL is the
    supremum of |a(f) - b(f)| over f with sup-norm <= 1 and l1-Lipschitz
    constant <= 1, but evaluated only on three admissible candidates built
    from sign(a - b): its upper and lower McShane extensions and their
    average, clipped to [-1, 1].  The result is therefore a lower bound on
    the true BL distance (and at most twice TV).
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    support = sorted(set(a.weights) | set(b.weights))
    if not support:
        return Distance(0.0, 0.0)
    diff = np.array([a.weights.get(r, 0.0) - b.weights.get(r, 0.0) for r in support])
    tv = 0.5 * float(np.abs(diff).sum())
    pts = np.array(support, dtype=float)
    g = np.sign(diff)
    dist = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=2)
    upper = np.max(g[None, :] - dist, axis=1)
    lower = np.min(g[None, :] + dist, axis=1)
    bl = 0.0
    for f in (upper, lower, 0.5 * (upper + lower)):
        bl = max(bl, abs(float(np.clip(f, -1.0, 1.0) @ diff)))
    return Distance(tv, bl)


def shared_pair_diagnostic(state: NetworkState) -> tuple[int, int]:
    """(max files sharing one server pair, number of pairs sharing >= 2 files).

    For ``d_max = 2`` the first number is max_{i<j} X_{i,j}; for larger d,
    a file with k copies contributes to each of its k(k-1)/2 server pairs.
    """
    counts: Counter = Counter()
    for hs in state.replicas:
        if len(hs) < 2:
            continue
        h = sorted(hs)
        for a in range(len(h)):
            for b in range(a + 1, len(h)):
                counts[(h[a], h[b])] += 1
    if not counts:
        return 0, 0
    return max(counts.values()), sum(1 for c in counts.values() if c >= 2)
