"""Dominating model: every copy of a file with fewer than ``d_max`` copies
duplicates at rate ``lam``.

This is not a storage policy; it is an analysis device whose file counts
pathwise bound those of the least-copies-first algorithm.  The module has
three parts: a standalone simulation, a coupled simulation of both models
that checks replica-set inclusion after every event, and a particle
simulation of the mean-field limit driven by the mean curves of
``spectral_decay.solve_V``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import choose_outside, derive_seed, make_rng
from .sim_core import (CollisionMode, Event, EventKind, NetworkState, SystemParams,
                       TrajectoryStats, _run_loop, apply_failure, init_network)
from .spectral_decay import solve_V


def dup_weight(state: NetworkState) -> int:
    """Number of copies belonging to under-replicated files, sum_{k<d} k n_k."""
    return sum(k * len(state.by_class[k]) for k in range(1, state.d_max))


def pick_copy(state: NetworkState, weight: int, rng) -> tuple[int, int]:
    """Uniform (file, holder) among copies of under-replicated files."""
    r = int(rng.random() * weight)
    for k in range(1, state.d_max):
        w = k * len(state.by_class[k])
        if r < w:
            break
        r -= w
    fid = state.by_class[k].choice(rng)
    holders = sorted(state.replicas[fid])
    return fid, holders[int(rng.random() * len(holders))]


def next_event_dominating(state: NetworkState, params: SystemParams, rng) -> Event:
    if state.alive_count == 0:
        return Event(math.inf, EventKind.ABSORBED)
    fail_rate = params.n_servers * params.mu
    total = fail_rate + params.lam * dup_weight(state)
    t = state.time + rng.exponential(1.0 / total)
    if rng.random() * total < fail_rate:
        return Event(t, EventKind.FAILURE, int(rng.random() * params.n_servers))
    return Event(t, EventKind.DUPLICATION)


def apply_dominating_duplication(state: NetworkState, rng) -> tuple[int, int, int]:
    fid, src = pick_copy(state, dup_weight(state), rng)
    target = choose_outside(rng, state.n_servers, state.replicas[fid])
    state.add_holder(fid, target)
    state.log("duplication", src, fid, target)
    return fid, src, target


def _apply_dominating_event(state, params, ev, rng):
    if ev.kind is EventKind.FAILURE:
        apply_failure(state, ev.server)
    else:
        apply_dominating_duplication(state, rng)


def run_dominating(params: SystemParams, replica_index: int = 0, *, keep_reduced: bool = True,
                   audit_every: int = 0) -> TrajectoryStats:
    """Simulate the dominating model; same initial placement and output as ``run_trajectory``.

    Targets are always uniform over non-holders.  With ``lam = 0`` the random
    stream is consumed exactly as in ``run_trajectory``, so both produce the
    same path for the same seed.
    """
    rng = make_rng(params.seed, replica_index)
    state = init_network(params, rng, track_pairs=False)
    return _run_loop(state, params, rng, replica_index, keep_reduced, audit_every,
                     next_event_dominating, _apply_dominating_event, "dominating")


# ---------------------------------------------------------------- coupling

class InclusionViolation(AssertionError):
    pass


@dataclass
class CoupledTrace:
    params: SystemParams
    replica_index: int
    derived_seed: int
    times: np.ndarray
    alive_a: np.ndarray
    alive_b: np.ndarray
    classes_a: np.ndarray
    classes_b: np.ndarray
    n_initial: int
    violations: int = 0
    n_events: int = 0
    counts: dict = field(default_factory=dict)

    @property
    def dominated(self) -> bool:
        return bool(np.all(self.alive_a <= self.alive_b))

    def write_csv(self, path) -> None:
        n = self.params.n_servers
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "L_alg_per_server", "L_dom_per_server"])
            for t, a, b in zip(self.times, self.alive_a, self.alive_b):
                w.writerow([format(float(t), ".12g"), format(a / n, ".12g"), format(b / n, ".12g")])


def _clone(state: NetworkState) -> NetworkState:
    out = NetworkState(state.n_servers, state.d_max)
    for hs in state.replicas:
        out.add_file(sorted(hs))
    return out


def run_coupled(params: SystemParams, replica_index: int = 0, *, strict: bool = True,
                audit_samples: bool = True) -> CoupledTrace:
    """Simulate the algorithm (A) and the dominating model (B) on one probability space.

    Clocks: failures at rate N mu (shared); one clock of rate lam per copy
    of an under-replicated file in B; one clock of rate lam per A-eligible
    server.  A B-clock on copy (f, i) also serves as A's duplication of f
    from i with probability 1/|C_i| when f lies in A's candidate class C_i
    at i.  A's target j is then drawn as in the algorithm; B places its copy
    on j too when j is new to B, and otherwise on a fresh uniform non-holder.
    The A-only clock at server i picks f uniformly in C_i; it does nothing
    when B_f is not full (those duplications are already carried by
    B-clocks), otherwise A's copy goes to a uniform node of B_f minus A_f.
    Inclusion A_f within B_f is checked after every event.
    """
    rng = make_rng(params.seed, replica_index)
    a = init_network(params, rng)
    b = _clone(a)
    n, d, lam, mu = params.n_servers, params.d_max, params.lam, params.mu
    merge = params.collision_mode is CollisionMode.UNIFORM_MERGE
    grid = params.sample_times()
    n_t = len(grid)
    alive_a = np.zeros(n_t, dtype=np.int64)
    alive_b = np.zeros(n_t, dtype=np.int64)
    cls_a = np.zeros((n_t, d), dtype=np.int64)
    cls_b = np.zeros((n_t, d), dtype=np.int64)
    counts = {"failure": 0, "b_clock": 0, "a_accepted": 0, "a_only": 0, "a_only_noop": 0}
    violations = 0
    n_events = 0
    j = 0
    t = 0.0

    def violation(fid, what):
        nonlocal violations
        violations += 1
        if strict:
            raise InclusionViolation(
                f"t={t:.6g} event={what} file={fid} A={sorted(a.replicas[fid])} "
                f"B={sorted(b.replicas[fid])}")

    while True:
        done = b.alive_count == 0
        if done:
            t_next = math.inf
        else:
            wb = dup_weight(b)
            rate_fail = n * mu
            rate_b = lam * wb
            rate_a = lam * len(a.eligible)
            total = rate_fail + rate_b + rate_a
            t_next = t + rng.exponential(1.0 / total)
        while j < n_t and grid[j] < t_next:
            alive_a[j], alive_b[j] = a.alive_count, b.alive_count
            cls_a[j], cls_b[j] = a.class_counts(), b.class_counts()
            if audit_samples:
                for fid in range(a.n_files):
                    if not a.replicas[fid] <= b.replicas[fid]:
                        violation(fid, "audit")
            j += 1
        if done or t_next > params.horizon:
            break
        t = t_next
        a.time = b.time = t
        n_events += 1
        v = rng.random() * total
        if v < rate_fail:
            i = int(rng.random() * n)
            apply_failure(a, i)
            apply_failure(b, i)
            counts["failure"] += 1
            continue
        if v < rate_fail + rate_b:
            counts["b_clock"] += 1
            fid, i = pick_copy(b, wb, rng)
            u = rng.random()
            ka = a.min_class(i)
            accept = False
            if i in a.replicas[fid] and 0 < ka < d:
                cand = a.index[i][ka]
                accept = fid in cand and u * len(cand) < 1.0
            if accept:
                counts["a_accepted"] += 1
                ha, hb = a.replicas[fid], b.replicas[fid]
                jt = (choose_outside(rng, n, (i,)) if merge else choose_outside(rng, n, ha))
                if jt not in ha:
                    a.add_holder(fid, jt)
                if jt in hb:
                    jt = choose_outside(rng, n, hb)
                b.add_holder(fid, jt)
            else:
                b.add_holder(fid, choose_outside(rng, n, b.replicas[fid]))
            if not a.replicas[fid] <= b.replicas[fid]:
                violation(fid, "b_clock")
            continue
        i = a.eligible.choice(rng)
        ka = a.min_class(i)
        fid = a.index[i][ka].choice(rng)
        hb = b.replicas[fid]
        if len(hb) < d:
            counts["a_only_noop"] += 1
            continue
        counts["a_only"] += 1
        ha = a.replicas[fid]
        if merge and choose_outside(rng, n, (i,)) in ha:
            continue
        spare = sorted(hb - ha)
        a.add_holder(fid, spare[int(rng.random() * len(spare))])
        if not a.replicas[fid] <= b.replicas[fid]:
            violation(fid, "a_only")
    return CoupledTrace(params, replica_index, derive_seed(params.seed, replica_index), grid,
                        alive_a, alive_b, cls_a, cls_b, len(a.replicas), violations, n_events,
                        counts)


# ---------------------------------------------------------------- limit particles

@dataclass
class TBarHistory:
    d: int
    rho: float
    mu: float
    times: np.ndarray
    mean: np.ndarray     # (n_t, d)
    sem: np.ndarray      # (n_t, d) standard errors of the means
    drive: np.ndarray    # (n_t, d) E T_k(t) from the mean ODE
    M: int
    final: np.ndarray    # (M, d) particle states at the horizon
    n_jumps: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"mean_T{k}" for k in range(1, self.d + 1)]
                       + [f"sem_T{k}" for k in range(1, self.d + 1)]
                       + [f"V{k}" for k in range(1, self.d + 1)])
            for row in zip(self.times, self.mean, self.sem, self.drive):
                w.writerow([format(float(row[0]), ".12g")]
                           + [format(float(v), ".12g") for part in row[1:] for v in part])


def simulate_tbar(d: int, rho: float, mu: float, V0, M: int, horizon: float, *,
                  seed: int = 0, sample_times=None, initial: str = "poisson",
                  drive_step: float | None = None) -> TBarHistory:
    """Particle simulation of the dominating limit process.

    Per particle, with r = (r_1..r_d) and lam = rho mu:
      reset to 0 at rate mu; r + e_k at rate lam V_{k-1}(mu t) for k >= 2;
      r - e_k + e_{k+1} at rate lam k r_k (k < d);
      r + e_{k-1} - e_k at rate mu (k-1) r_k (k > 1).
    V is the RK4 solution of the mean ODE started at V0, interpolated
    linearly.  ``initial`` is ``"poisson"`` (independent Poisson(V0_k)
    coordinates) or ``"fixed"`` (every particle starts at V0, which must be
    integral).  Event times are exact, by thinning against
    mu + lam sum_k sup V_k + (lam d + mu (d-1)) |r|_1.
    """
    if M < 1000:
        raise ValueError("need at least 1000 particles")
    V0 = np.asarray(V0, dtype=float)
    if V0.shape != (d,):
        raise ValueError(f"V0 must have length {d}")
    lam = rho * mu
    if sample_times is None:
        sample_times = np.linspace(0.0, horizon, 11)
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times[-1] > horizon:
        raise ValueError("drive curve shorter than the requested sample times")
    # drive on a fine grid in scaled time
    tau_end = mu * horizon
    step = drive_step or 0.01
    n_drive = max(2, int(math.ceil(tau_end / step)) + 1)
    tau = np.linspace(0.0, tau_end, n_drive)
    V = solve_V(d, rho, V0, tau)
    V_prev = np.zeros((n_drive, d))
    V_prev[:, 1:] = V[:, :-1]          # V_{k-1} drives arrivals into class k
    arrival_bound = lam * V_prev.max(axis=0).sum()

    rng = make_rng(seed, 0)
    if initial == "fixed":
        if not np.all(V0 == np.floor(V0)):
            raise ValueError("fixed initial state must be integral")
        r = np.tile(V0.astype(np.int64), (M, 1))
    elif initial == "poisson":
        r = rng.poisson(V0, size=(M, d)).astype(np.int64)
    else:
        raise ValueError(f"unknown initial mode {initial!r}")

    n_s = len(sample_times)
    s1 = np.zeros((n_s + 1, d))
    s2 = np.zeros((n_s + 1, d))
    t = np.zeros(M)
    active = np.ones(M, dtype=bool)
    kk = np.arange(1, d + 1)
    up_w = lam * np.where(kk < d, kk, 0)          # per-file rate of moving up from class k
    down_w = mu * (kk - 1)                        # per-file rate of moving down from class k
    n_jumps = 0
    while active.any():
        ia = np.nonzero(active)[0]
        ra = r[ia]
        u = rng.random((2, len(ia)))
        norm = ra.sum(axis=1)
        bound = mu + arrival_bound + (lam * d + mu * (d - 1)) * norm
        t_old = t[ia]
        t_new = t_old - np.log1p(-u[0]) / bound
        start = np.searchsorted(sample_times, t_old, side="left")
        stop = np.searchsorted(sample_times, t_new, side="left")
        rec = stop > start
        if rec.any():
            rf = ra[rec].astype(float)
            np.add.at(s1, start[rec], rf)
            np.add.at(s1, stop[rec], -rf)
            np.add.at(s2, start[rec], rf * rf)
            np.add.at(s2, stop[rec], -rf * rf)
        t[ia] = t_new
        live = t_new <= horizon
        active[ia[~live]] = False
        if not live.any():
            continue
        il = ia[live]
        rl = ra[live]
        tl = t_new[live]
        pos = np.interp(mu * tl, tau, np.arange(n_drive))
        lo = np.minimum(pos.astype(np.int64), n_drive - 2)
        frac = (pos - lo)[:, None]
        drive = (1 - frac) * V_prev[lo] + frac * V_prev[lo + 1]
        # rate columns: reset | arrivals into k | up from k | down from k
        rates = np.concatenate([np.full((len(il), 1), mu), lam * drive,
                                rl * up_w[None, :], rl * down_w[None, :]], axis=1)
        cum = np.cumsum(rates, axis=1)
        v = u[1][live] * bound[live]
        accepted = v < cum[:, -1]
        if not accepted.any():
            continue
        col = np.argmax(v[:, None] < cum, axis=1)
        rows = np.nonzero(accepted)[0]
        c = col[rows]
        new = rl[rows].copy()
        reset = c == 0
        new[reset] = 0
        arr = (c >= 1) & (c <= d)
        new[arr, c[arr] - 1] += 1
        upm = (c > d) & (c <= 2 * d)
        k_up = c[upm] - d - 1
        new[upm, k_up] -= 1
        new[upm, k_up + 1] += 1
        dn = c > 2 * d
        k_dn = c[dn] - 2 * d - 1
        new[dn, k_dn] -= 1
        new[dn, k_dn - 1] += 1
        if np.any(new < 0):
            raise RuntimeError("negative class population in limit particle")
        r[il[rows]] = new
        n_jumps += len(rows)
    m1 = np.cumsum(s1, axis=0)[:n_s] / M
    m2 = np.cumsum(s2, axis=0)[:n_s] / M
    var = np.maximum(m2 - m1 * m1, 0.0)
    sem = np.sqrt(var / max(M - 1, 1))
    drive_out = solve_V(d, rho, V0, mu * sample_times)
    return TBarHistory(d, rho, mu, sample_times, m1, sem, drive_out, M, r, n_jumps)
