"""Exact event-driven simulation of the N-server replication network.

Each file keeps at most ``d_max`` copies on distinct servers.  Servers fail
at rate ``mu`` and lose every copy they hold; a server holding a file from
its least-replicated non-full copy class duplicates one such file (chosen
uniformly) at rate ``lam`` onto another server.

Servers are indexed ``0..N-1``.  Random numbers are drawn in a fixed order
per event: waiting time, event kind, server, then (for duplications) file and
target server.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from .rng import choose_outside, derive_seed, make_rng


class CollisionMode(str, Enum):
    AVOID_HOLDERS = "avoid_holders"  # target uniform among servers not holding the file
    UNIFORM_MERGE = "uniform_merge"  # target uniform among the other servers; no-op if it already holds


@dataclass(frozen=True)
class FixedTotal:
    n_files: int

    def __post_init__(self):
        if self.n_files < 0:
            raise ValueError("n_files must be >= 0")


@dataclass(frozen=True)
class PerServerLaw:
    """Number of files first placed on each server, drawn i.i.d.

    ``kind`` is ``"poisson"`` or ``"constant"``; a custom ``sampler(rng, n)``
    overrides both and must return non-negative integers.
    """

    kind: str = "poisson"
    mean: float = 1.0
    sampler: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.sampler is not None:
            return
        if self.kind not in ("poisson", "constant"):
            raise ValueError(f"unknown per-server law {self.kind!r}")
        if self.mean < 0:
            raise ValueError("per-server law must not admit negative values")
        if self.kind == "constant" and self.mean != int(self.mean):
            raise ValueError("constant per-server load must be an integer")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.sampler is not None:
            a = np.asarray(self.sampler(rng, n))
            if a.shape != (n,) or np.any(a < 0) or not np.all(a == np.floor(a)):
                raise ValueError("per-server sampler must return n non-negative integers")
            return a.astype(np.int64)
        if self.kind == "constant":
            return np.full(n, int(self.mean), dtype=np.int64)
        return rng.poisson(self.mean, size=n)


@dataclass(frozen=True)
class SystemParams:
    n_servers: int
    lam: float
    mu: float
    d_max: int = 2
    initial_load: FixedTotal | PerServerLaw = FixedTotal(0)
    horizon: float = 1.0
    seed: int = 0
    collision_mode: CollisionMode = CollisionMode.AVOID_HOLDERS
    n_samples: int = 200

    def __post_init__(self):
        if self.n_servers < 1:
            raise ValueError("n_servers must be positive")
        if self.d_max < 1:
            raise ValueError("d_max must be >= 1")
        if self.n_servers < self.d_max:
            raise ValueError("n_servers must be >= d_max")
        if self.lam < 0 or self.mu <= 0:
            raise ValueError("need lam >= 0 and mu > 0")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        object.__setattr__(self, "collision_mode", CollisionMode(self.collision_mode))

    @property
    def rho(self) -> float:
        return self.lam / self.mu

    def sample_times(self) -> np.ndarray:
        if self.horizon == 0:
            return np.zeros(1)
        return np.linspace(0.0, self.horizon, self.n_samples + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["collision_mode"] = self.collision_mode.value
        load = self.initial_load
        if isinstance(load, FixedTotal):
            d["initial_load"] = {"type": "fixed_total", "n_files": load.n_files}
        else:
            d["initial_load"] = {"type": "per_server", "kind": load.kind, "mean": load.mean}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemParams":
        d = dict(d)
        load = d.get("initial_load", {"type": "fixed_total", "n_files": 0})
        if isinstance(load, dict):
            load = dict(load)
            kind = load.pop("type", "fixed_total")
            if kind == "fixed_total":
                load = FixedTotal(int(load["n_files"]))
            elif kind == "per_server":
                load = PerServerLaw(load.get("kind", "poisson"), float(load.get("mean", 1.0)))
            else:
                raise ValueError(f"unknown initial_load type {kind!r}")
        d["initial_load"] = load
        return cls(**d)


class IndexedSet:
    """Set with O(1) add, discard and uniform random choice."""

    __slots__ = ("items", "pos")

    def __init__(self, items=()):
        self.items = []
        self.pos = {}
        for x in items:
            self.add(x)

    def add(self, x) -> None:
        if x not in self.pos:
            self.pos[x] = len(self.items)
            self.items.append(x)

    def discard(self, x) -> None:
        i = self.pos.pop(x, None)
        if i is None:
            return
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
            self.pos[last] = i

    def choice(self, rng: np.random.Generator):
        return self.items[int(rng.random() * len(self.items))]

    def __len__(self):
        return len(self.items)

    def __contains__(self, x):
        return x in self.pos

    def __iter__(self):
        return iter(self.items)

    def __bool__(self):
        return bool(self.items)


class NetworkState:
    """Microscopic state: replica sets plus per-server copy-class indexes.

    ``index[i][k]`` holds the ids of files with exactly ``k`` copies, one of
    them on server ``i``; ``by_class[k]`` holds all files with ``k`` copies.
    ``eligible`` is the set of servers whose least non-empty class is below
    ``d_max``, i.e. the servers whose duplication clock is active.
    """

    def __init__(self, n_servers: int, d_max: int, *, track_pairs: bool = False,
                 keep_log: bool = False):
        self.n_servers = n_servers
        self.d_max = d_max
        self.time = 0.0
        self.replicas: list[set[int]] = []
        self.index = [[IndexedSet() for _ in range(d_max + 1)] for _ in range(n_servers)]
        self.by_class = [IndexedSet() for _ in range(d_max + 1)]
        self.eligible = IndexedSet()
        self.alive_count = 0
        self.death_times: list[float] = []
        self.event_log: list | None = [] if keep_log else None
        self.pair_counts: Counter | None = Counter() if track_pairs else None
        self.pair_flagged: set[int] = set()
        self.max_shared = 0

    @property
    def n_files(self) -> int:
        return len(self.replicas)

    def min_class(self, i: int) -> int:
        """Least non-empty copy class at server ``i`` (0 if it holds nothing)."""
        for k, s in enumerate(self.index[i]):
            if k and s:
                return k
        return 0

    def _refresh(self, i: int) -> None:
        k = self.min_class(i)
        if 0 < k < self.d_max:
            self.eligible.add(i)
        else:
            self.eligible.discard(i)

    def _pair_add(self, holders, j: int) -> None:
        pc = self.pair_counts
        for h in holders:
            key = (h, j) if h < j else (j, h)
            c = pc[key] + 1
            pc[key] = c
            if c > self.max_shared:
                self.max_shared = c
            if c >= 2:
                self.pair_flagged.add(h)
                self.pair_flagged.add(j)

    def _pair_remove(self, holders, i: int) -> None:
        pc = self.pair_counts
        for h in holders:
            key = (h, i) if h < i else (i, h)
            c = pc[key] - 1
            if c:
                pc[key] = c
            else:
                del pc[key]

    def add_file(self, holders) -> int:
        fid = len(self.replicas)
        hs = set()
        self.replicas.append(hs)
        self.alive_count += 1
        for h in holders:
            self.add_holder(fid, h, _new=True)
        return fid

    def add_holder(self, fid: int, j: int, _new: bool = False) -> None:
        hs = self.replicas[fid]
        k = len(hs)
        if k == 0 and not _new:
            raise RuntimeError(f"file {fid} is dead")
        if j in hs:
            return
        if k:
            for h in hs:
                self.index[h][k].discard(fid)
                self.index[h][k + 1].add(fid)
            self.by_class[k].discard(fid)
        if self.pair_counts is not None:
            self._pair_add(hs, j)
        hs.add(j)
        self.index[j][k + 1].add(fid)
        self.by_class[k + 1].add(fid)
        for h in hs:
            self._refresh(h)

    def remove_holder(self, fid: int, i: int) -> None:
        hs = self.replicas[fid]
        k = len(hs)
        hs.remove(i)
        self.index[i][k].discard(fid)
        self.by_class[k].discard(fid)
        if self.pair_counts is not None:
            self._pair_remove(hs, i)
        if k == 1:
            self.alive_count -= 1
            self.death_times.append(self.time)
        else:
            self.by_class[k - 1].add(fid)
            for h in hs:
                self.index[h][k].discard(fid)
                self.index[h][k - 1].add(fid)
                self._refresh(h)

    def files_at(self, i: int) -> list[int]:
        return [f for k, s in enumerate(self.index[i]) if k for f in s]

    def reduced(self) -> np.ndarray:
        """(N, d_max) array of per-server class counts R_{i,k}."""
        d = self.d_max
        return np.array([[len(idx[k]) for k in range(1, d + 1)] for idx in self.index],
                        dtype=np.int64).reshape(self.n_servers, d)

    def class_counts(self) -> np.ndarray:
        return np.array([len(self.by_class[k]) for k in range(1, self.d_max + 1)], dtype=np.int64)

    def audit(self) -> None:
        """Rebuild every derived index from the replica sets and compare; raises on mismatch."""
        d = self.d_max
        index = [[set() for _ in range(d + 1)] for _ in range(self.n_servers)]
        by_class = [set() for _ in range(d + 1)]
        alive = 0
        for fid, hs in enumerate(self.replicas):
            k = len(hs)
            if k > d:
                raise AssertionError(f"file {fid} has {k} > d_max copies")
            if k:
                alive += 1
                by_class[k].add(fid)
                for h in hs:
                    index[h][k].add(fid)
        if alive != self.alive_count:
            raise AssertionError(f"alive_count {self.alive_count} != {alive}")
        for k in range(1, d + 1):
            if set(self.by_class[k]) != by_class[k]:
                raise AssertionError(f"global class {k} index mismatch")
        for i in range(self.n_servers):
            for k in range(1, d + 1):
                if set(self.index[i][k]) != index[i][k]:
                    raise AssertionError(f"server {i} class {k} index mismatch")
        elig = {i for i in range(self.n_servers) if 0 < self.min_class(i) < d}
        if set(self.eligible) != elig:
            raise AssertionError("eligible-server set mismatch")
        weighted = sum(len(index[i][k]) / k for i in range(self.n_servers) for k in range(1, d + 1))
        if abs(weighted - alive) > 1e-9:
            raise AssertionError("sum_i sum_k R_ik / k != alive_count")

    def log(self, kind: str, *ids) -> None:
        if self.event_log is not None:
            self.event_log.append((self.time, kind, ids))


def init_network(params: SystemParams, rng: np.random.Generator, *,
                 track_pairs: bool = False, keep_log: bool = False) -> NetworkState:
    """Place the initial files, each with ``d_max`` copies on distinct uniform servers."""
    n, d = params.n_servers, params.d_max
    state = NetworkState(n, d, track_pairs=track_pairs, keep_log=keep_log)
    load = params.initial_load
    if isinstance(load, FixedTotal):
        for _ in range(load.n_files):
            holders: list[int] = []
            for _ in range(d):
                holders.append(choose_outside(rng, n, holders))
            state.add_file(holders)
    else:
        counts = load.sample(rng, n)
        for i in range(n):
            for _ in range(int(counts[i])):
                holders = [i]
                for _ in range(d - 1):
                    holders.append(choose_outside(rng, n, holders))
                state.add_file(holders)
    return state


class EventKind(str, Enum):
    FAILURE = "failure"
    DUPLICATION = "duplication"
    ABSORBED = "absorbed"


class Event(NamedTuple):
    time: float
    kind: EventKind
    server: int = -1


def next_event(state: NetworkState, params: SystemParams, rng: np.random.Generator) -> Event:
    """Sample the next transition by competing exponential clocks."""
    if state.alive_count == 0:
        return Event(math.inf, EventKind.ABSORBED)
    fail_rate = params.n_servers * params.mu
    dup_rate = params.lam * len(state.eligible)
    total = fail_rate + dup_rate
    t = state.time + rng.exponential(1.0 / total)
    if rng.random() * total < fail_rate:
        return Event(t, EventKind.FAILURE, int(rng.random() * params.n_servers))
    return Event(t, EventKind.DUPLICATION, state.eligible.choice(rng))


def apply_failure(state: NetworkState, server_i: int, rng=None) -> NetworkState:
    """Server ``server_i`` loses every copy it holds."""
    files = state.files_at(server_i)
    for fid in files:
        state.remove_holder(fid, server_i)
    state._refresh(server_i)
    state.log("failure", server_i, len(files))
    return state


def pick_target(rng, n: int, source: int, holders, mode: CollisionMode) -> int:
    if mode is CollisionMode.AVOID_HOLDERS:
        return choose_outside(rng, n, holders)
    return choose_outside(rng, n, (source,))


def apply_duplication(state: NetworkState, server_i: int, params: SystemParams,
                      rng: np.random.Generator) -> NetworkState:
    """Duplicate one least-replicated file of ``server_i`` onto a random server."""
    k = state.min_class(server_i)
    if not 0 < k < state.d_max:
        raise RuntimeError(f"server {server_i} has no duplicable file (least class {k})")
    fid = state.index[server_i][k].choice(rng)
    hs = state.replicas[fid]
    target = pick_target(rng, state.n_servers, server_i, hs, params.collision_mode)
    if target in hs:
        state.log("duplication-noop", server_i, fid, target)
        return state
    state.add_holder(fid, target)
    state.log("duplication", server_i, fid, target)
    return state


@dataclass
class TrajectoryStats:
    """Sampled output of one trajectory on the uniform output grid."""

    params: SystemParams
    replica_index: int
    derived_seed: int
    times: np.ndarray
    alive: np.ndarray            # L^N(t) at each sample time
    class_counts: np.ndarray     # (n_t, d) number of alive files with k copies
    n_initial: int
    death_times: np.ndarray      # exact times at which files were lost, increasing
    reduced: np.ndarray | None = None   # (n_t, N, d) per-server R_{i,k}
    pair_flagged: np.ndarray | None = None  # servers in a pair sharing >= 2 files at some time
    max_shared: int = 0
    n_events: int = 0
    absorbed_at: float | None = None
    label: str = "algorithm"

    @property
    def d(self) -> int:
        return self.class_counts.shape[1]

    @property
    def alive_fraction(self) -> np.ndarray:
        """L^N(t) / F_N."""
        if self.n_initial == 0:
            return np.zeros_like(self.times)
        return self.alive / self.n_initial

    @property
    def alive_per_server(self) -> np.ndarray:
        """L^N(t) / N."""
        return self.alive / self.params.n_servers

    @property
    def mean_reduced(self) -> np.ndarray:
        """(n_t, d) server average of R_{i,k}; equals k * (#files with k copies) / N."""
        k = np.arange(1, self.d + 1)
        return self.class_counts * k / self.params.n_servers

    def durability(self, delta: float, exact: bool = True) -> float | None:
        return durability(self, delta, exact=exact)

    def write_csv(self, path) -> None:
        """Columns: t, alive_fraction (L/F_N), mean_R1..mean_Rd."""
        m = self.mean_reduced
        prefix = "mean_R" if self.label == "algorithm" else "mean_T"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "alive_fraction"] + [f"{prefix}{k}" for k in range(1, self.d + 1)])
            for j, t in enumerate(self.times):
                w.writerow([_fmt(t), _fmt(self.alive_fraction[j])] + [_fmt(v) for v in m[j]])

    def summary(self, deltas=(0.1, 0.5, 0.9)) -> dict:
        n = self.params.n_servers
        return {
            "model": self.label,
            "params": self.params.to_dict(),
            "seed": self.params.seed,
            "replica_index": self.replica_index,
            "derived_seed": self.derived_seed,
            "n_initial_files": self.n_initial,
            "durability": {str(dl): self.durability(dl) for dl in deltas},
            "diagnostics": {
                "n_events": self.n_events,
                "absorbed_at": self.absorbed_at,
                "final_alive": int(self.alive[-1]),
                "max_shared": self.max_shared,
                "pair_flagged_fraction": (None if self.pair_flagged is None
                                          else float(self.pair_flagged.sum()) / n),
            },
        }

    def write_json(self, path, deltas=(0.1, 0.5, 0.9)) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(deltas), fh, indent=2, sort_keys=True)


def _fmt(x) -> str:
    return format(float(x), ".12g")


def durability(stats: TrajectoryStats, delta: float, exact: bool = True) -> float | None:
    """First time at which at most ``(1 - delta) F_N`` files remain.

    With ``exact=True`` the crossing is read off the recorded file-loss
    times; otherwise it is the first output-grid time satisfying the bound.
    Returns ``None`` if the fraction is not lost within the horizon.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    f = stats.n_initial
    if f == 0:
        return 0.0
    if exact:
        need = max(1, math.ceil(delta * f - 1e-9))
        if len(stats.death_times) >= need:
            return float(stats.death_times[need - 1])
        return None
    hit = np.nonzero(stats.alive <= (1 - delta) * f)[0]
    return float(stats.times[hit[0]]) if hit.size else None


def run_trajectory(params: SystemParams, replica_index: int = 0, *, keep_reduced: bool = True,
                   track_pairs: bool = True, audit_every: int = 0) -> TrajectoryStats:
    """Simulate from the initial placement to the horizon (or absorption).

    Deterministic given ``(params.seed, replica_index)``.  ``audit_every > 0``
    runs the full index audit every that many events (slow; for tests).
    """
    rng = make_rng(params.seed, replica_index)
    state = init_network(params, rng, track_pairs=track_pairs)
    return _run_loop(state, params, rng, replica_index, keep_reduced, audit_every,
                     next_event, _apply_algorithm_event, "algorithm")


def _apply_algorithm_event(state, params, ev, rng):
    if ev.kind is EventKind.FAILURE:
        apply_failure(state, ev.server)
    else:
        apply_duplication(state, ev.server, params, rng)


def _run_loop(state, params, rng, replica_index, keep_reduced, audit_every,
              sample_event, apply_event, label) -> TrajectoryStats:
    grid = params.sample_times()
    n_t, d = len(grid), params.d_max
    alive = np.zeros(n_t, dtype=np.int64)
    classes = np.zeros((n_t, d), dtype=np.int64)
    reduced = np.zeros((n_t, params.n_servers, d), dtype=np.int32) if keep_reduced else None
    n_initial = state.alive_count
    j = 0
    n_events = 0
    absorbed_at = None
    while True:
        ev = sample_event(state, params, rng)
        # state is constant on [state.time, ev.time)
        while j < n_t and grid[j] < ev.time:
            alive[j] = state.alive_count
            classes[j] = state.class_counts()
            if keep_reduced:
                reduced[j] = state.reduced()
            j += 1
        if ev.kind is EventKind.ABSORBED:
            absorbed_at = state.time
            break
        if ev.time > params.horizon:
            break
        state.time = ev.time
        apply_event(state, params, ev, rng)
        n_events += 1
        if audit_every and n_events % audit_every == 0:
            state.audit()
    pair_flagged = None
    if state.pair_counts is not None:
        pair_flagged = np.zeros(params.n_servers, dtype=bool)
        pair_flagged[list(state.pair_flagged)] = True
    return TrajectoryStats(
        params=params, replica_index=replica_index,
        derived_seed=derive_seed(params.seed, replica_index),
        times=grid, alive=alive, class_counts=classes, n_initial=n_initial,
        death_times=np.asarray(state.death_times, dtype=float), reduced=reduced,
        pair_flagged=pair_flagged, max_shared=state.max_shared, n_events=n_events,
        absorbed_at=absorbed_at, label=label,
    )
