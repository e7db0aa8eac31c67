"""Mean-field limit for two copies per file.

The law of a tagged server's reduced state (x, y) = (R1, R2) evolves by the
forward equation of a jump process whose rates depend on its own law through
p(t) = P(x(t) > 0):

    (x, y) -> (x-1, y+1)  at rate lam       if x > 0
    (x, y) -> (x,   y+1)  at rate lam p(t)
    (x, y) -> (0,   0)    at rate mu
    (x, y) -> (x+1, y-1)  at rate mu y

Two independent solvers are provided: an RK4 integrator on a truncated grid
and a particle fixed-point iteration on the curve p.  A third check is the
generating function of x + y started from (0, r2).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .reduced_view import DiscreteMeasure
from .rng import make_rng

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-10
NEG_TOL = 1e-14


class GridOverflow(RuntimeError):
    pass


def fp_generator_apply(q: np.ndarray, p: float, lam: float, mu: float,
                       overflow_tol: float | None = None) -> np.ndarray:
    """dq/dt for fixed p on the grid q[x, y], 0 <= x, y <= K.

    Jumps that would leave the grid are suppressed, so the total mass is
    conserved exactly.  With ``overflow_tol`` set, a ``GridOverflow`` is
    raised when the suppressed flux exceeds it.
    """
    if not -1e-12 <= p <= 1 + 1e-12:
        raise ValueError("p must lie in [0, 1]")
    K = q.shape[0] - 1
    y = np.arange(K + 1, dtype=float)
    dq = np.zeros_like(q)
    total = q.sum()

    # reset to (0, 0)
    dq -= mu * q
    dq[0, 0] += mu * total

    # (x, y) -> (x-1, y+1) for x > 0, y < K
    f = lam * q[1:, :-1]
    dq[1:, :-1] -= f
    dq[:-1, 1:] += f

    # (x, y) -> (x, y+1) for y < K
    f = lam * p * q[:, :-1]
    dq[:, :-1] -= f
    dq[:, 1:] += f

    # (x, y) -> (x+1, y-1) for y > 0, x < K
    f = mu * y[None, 1:] * q[:-1, 1:]
    dq[:-1, 1:] -= f
    dq[1:, :-1] += f

    if overflow_tol is not None:
        lost = lam * q[1:, K].sum() + lam * p * q[:, K].sum() + mu * (y[1:] * q[K, 1:]).sum()
        if lost > overflow_tol:
            raise GridOverflow(f"suppressed boundary flux {lost:.3g} exceeds {overflow_tol:.3g}")
    return dq


def p_of(q: np.ndarray) -> float:
    """P(x > 0) under the grid law."""
    return float(min(1.0, max(0.0, 1.0 - q[0, :].sum())))


def moments(q: np.ndarray) -> tuple[float, float]:
    K = q.shape[0] - 1
    k = np.arange(K + 1, dtype=float)
    return float(k @ q.sum(axis=1)), float(k @ q.sum(axis=0))


def boundary_mass(q: np.ndarray) -> float:
    return float(q[-1, :].sum() + q[:-1, -1].sum())


def law_to_grid(initial, K: int) -> np.ndarray:
    """Dense (K+1)^2 grid from a dict {(x, y): w}, a DiscreteMeasure or an array."""
    if isinstance(initial, np.ndarray):
        q = np.zeros((K + 1, K + 1))
        a, b = initial.shape
        q[:a, :b] = initial
        return q
    weights = initial.weights if isinstance(initial, DiscreteMeasure) else initial
    q = np.zeros((K + 1, K + 1))
    for (x, y), w in weights.items():
        q[x, y] += w
    return q


def support_bound(initial) -> int:
    if isinstance(initial, np.ndarray):
        nz = np.argwhere(initial > 0)
        return int(nz.max()) if len(nz) else 0
    weights = initial.weights if isinstance(initial, DiscreteMeasure) else initial
    return max((max(r) for r, w in weights.items() if w > 0), default=0)


def poisson_r2_law(mean: float, cutoff: float = 1e-16) -> dict:
    """Law of (0, Y) with Y ~ Poisson(mean), truncated where the pmf drops below ``cutoff``.

    The truncated mass is put back on the last retained point.
    """
    out = {}
    pk = math.exp(-mean)
    k = 0
    acc = 0.0
    while True:
        out[(0, k)] = pk
        acc += pk
        k += 1
        pk *= mean / k
        if k > mean and pk < cutoff:
            break
    out[(0, k - 1)] += 1.0 - acc
    return out


@dataclass
class FPState:
    grid: np.ndarray
    K: int
    time: float
    p_history: list = field(default_factory=list)


@dataclass
class FPHistory:
    lam: float
    mu: float
    times: np.ndarray
    p: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    mass: np.ndarray
    grids: list | None
    final: FPState
    n_clamped: int = 0
    k_growths: list = field(default_factory=list)

    @property
    def L(self) -> np.ndarray:
        return self.m1 + 0.5 * self.m2

    def grid_at(self, j: int) -> np.ndarray:
        if self.grids is None:
            raise ValueError("grids were not kept")
        return self.grids[j]

    def pgf(self, j: int, u: float) -> float:
        """E[u^(x+y)] under the recorded law at output index j."""
        q = self.grid_at(j)
        K = q.shape[0] - 1
        s = np.add.outer(np.arange(K + 1), np.arange(K + 1))
        return float((q * np.power(float(u), s)).sum())

    def p_table(self) -> tuple[np.ndarray, np.ndarray]:
        return self.times, self.p

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "p", "m1", "m2", "L"])
            for row in zip(self.times, self.p, self.m1, self.m2, self.L):
                w.writerow([format(float(v), ".12g") for v in row])

    def snapshot_json(self, j: int, cutoff: float = 0.0) -> str:
        return DiscreteMeasure.from_grid(self.grid_at(j), cutoff).to_json()


def _clamp(q: np.ndarray) -> int:
    neg = q < 0
    if not neg.any():
        return 0
    worst = float(q.min())
    if worst < -NEG_TOL:
        raise FloatingPointError(f"negative probability {worst:.3g} in forward-equation grid")
    n = int(neg.sum())
    q[neg] = 0.0
    return n


def fp_solve(lam: float, mu: float, initial, times, *, K0: int | None = None,
             K_max: int = 1024, keep_grids: bool = True, safety: float = 0.1) -> FPHistory:
    """Integrate the self-consistent forward equation with RK4.

    ``initial`` is a law on N^2 with bounded support.  The step is at most
    ``safety / (mu (1 + K) + 2 lam)``; each output interval is split into
    equal steps.  K starts at the initial support bound + 10 (or ``K0``) and
    doubles whenever the boundary layer carries more than 1e-10 mass.
    """
    if lam < 0 or mu <= 0:
        raise ValueError("need lam >= 0 and mu > 0")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or times[0] < 0 or np.any(np.diff(times) < 0):
        raise ValueError("output times must be a non-decreasing sequence starting at >= 0")
    K = K0 if K0 is not None else support_bound(initial) + 10
    q = law_to_grid(initial, K)
    if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-10:
        raise ValueError("initial law must be a probability measure")

    def rhs(g):
        return fp_generator_apply(g, p_of(g), lam, mu)

    n_out = len(times)
    p_out, m1_out, m2_out, mass_out = (np.empty(n_out) for _ in range(4))
    grids = [] if keep_grids else None
    growths = []
    n_clamped = 0
    t = 0.0
    for j, target in enumerate(times):
        while t < target - 1e-15:
            while boundary_mass(q) > BOUNDARY_TOL:
                if 2 * K > K_max:
                    raise GridOverflow(f"truncation bound would exceed K_max={K_max}")
                K *= 2
                q = law_to_grid(q, K)
                growths.append((t, K))
                log.info("grid grown to K=%d at t=%.4g", K, t)
            h_max = safety / (mu * (1 + K) + 2 * lam)
            span = target - t
            n = max(1, math.ceil(span / h_max - 1e-9))
            h = span / n
            if h <= 1e-14 * max(1.0, target):
                raise FloatingPointError("step size underflow")
            # take steps until done or the boundary needs checking again
            for _ in range(n):
                k1 = rhs(q)
                k2 = rhs(q + 0.5 * h * k1)
                k3 = rhs(q + 0.5 * h * k2)
                k4 = rhs(q + h * k3)
                q = q + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
                n_clamped += _clamp(q)
                t += h
                if boundary_mass(q) > BOUNDARY_TOL:
                    break
            if abs(t - target) < 1e-12 * max(1.0, target):
                t = target
        p_out[j] = p_of(q)
        m1_out[j], m2_out[j] = moments(q)
        mass_out[j] = q.sum()
        if keep_grids:
            grids.append(q.copy())
    if n_clamped:
        log.info("clamped %d tiny negative grid entries", n_clamped)
    final = FPState(q, K, t, list(p_out))
    return FPHistory(lam, mu, times, p_out, m1_out, m2_out, mass_out, grids, final,
                     n_clamped, growths)


# ---------------------------------------------------------------- particles

class PicardNonConvergence(RuntimeError):
    def __init__(self, result):
        super().__init__(f"no convergence after {len(result.residuals)} iterations; "
                         f"residuals {[round(r, 5) for r in result.residuals]}")
        self.result = result


@dataclass
class ParticleEnsemble:
    x: np.ndarray
    y: np.ndarray
    driving_p: np.ndarray
    dt: float
    iteration_index: int


@dataclass
class PicardResult:
    times: np.ndarray        # left ends of the piecewise-constant p grid, plus T
    p: np.ndarray
    residuals: list
    converged: bool
    noise_floor: float
    ensemble: ParticleEnsemble

    def p_at(self, t) -> np.ndarray:
        """Piecewise-constant evaluation of the fixed-point curve."""
        dt = self.ensemble.dt
        idx = np.clip(np.floor(np.asarray(t, dtype=float) / dt + 1e-9).astype(int), 0, len(self.p) - 1)
        return self.p[idx]


def _sample_initial(initial, M: int, rng) -> tuple[np.ndarray, np.ndarray]:
    weights = initial.weights if isinstance(initial, DiscreteMeasure) else initial
    pts = sorted(weights)
    w = np.array([weights[r] for r in pts], dtype=float)
    idx = rng.choice(len(pts), size=M, p=w / w.sum())
    arr = np.array(pts, dtype=np.int64).reshape(len(pts), 2)
    return arr[idx, 0].copy(), arr[idx, 1].copy()


def run_particles(lam: float, mu: float, initial, driving_p: np.ndarray, horizon: float,
                  M: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Simulate M independent particles under an exogenous piecewise-constant p.

    ``driving_p[g]`` applies on [g dt, (g+1) dt) with dt = horizon / (len - 1);
    the last entry is the value at the horizon.  Returns
    ``(fraction with x > 0 at each grid time, final x, final y)``.

    Exact thinning against the per-particle bound 2 lam + mu + mu y, which
    does not depend on p.  Each loop draws exactly 2M uniforms, so particle
    m sees the same numbers for its n-th candidate whatever p is (common
    random numbers across Picard iterations).
    """
    G = len(driving_p) - 1
    dt = horizon / G
    rng = make_rng(seed, 0)
    x, y = _sample_initial(initial, M, rng)
    t = np.zeros(M)
    active = np.ones(M, dtype=bool)
    diff = np.zeros(G + 2, dtype=np.int64)
    while True:
        u = rng.random((2, M))
        if not active.any():
            break
        ia = np.nonzero(active)[0]
        xa, ya = x[ia], y[ia]
        bound = 2 * lam + mu + mu * ya
        t_old = t[ia]
        t_new = t_old - np.log1p(-u[0, ia]) / bound
        # record x > 0 on grid points in [t_old, min(t_new, T)]
        t_rec = np.minimum(t_new, horizon * (1 + 1e-12))
        pos = xa > 0
        if pos.any():
            start = np.ceil(t_old[pos] / dt - 1e-9).astype(np.int64)
            stop = np.where(t_new[pos] > horizon, G + 1,
                            np.ceil(t_rec[pos] / dt - 1e-9).astype(np.int64))
            keep = stop > start
            np.add.at(diff, start[keep], 1)
            np.add.at(diff, stop[keep], -1)
        done = t_new > horizon
        t[ia] = t_new
        live = ~done
        g = np.minimum((t_new / dt).astype(np.int64), G)
        pv = driving_p[g]
        v = u[1, ia] * bound
        r_a = lam * pos
        r_b = r_a + lam * pv
        r_c = r_b + mu
        r_d = r_c + mu * ya
        jump_a = live & (v < r_a)
        jump_b = live & (v >= r_a) & (v < r_b)
        reset = live & (v >= r_b) & (v < r_c)
        jump_d = live & (v >= r_c) & (v < r_d)
        xa = xa - jump_a + jump_d
        ya = ya + jump_a + jump_b - jump_d
        xa[reset] = 0
        ya[reset] = 0
        x[ia], y[ia] = xa, ya
        active[ia[done]] = False
    counts = np.cumsum(diff)[: G + 1]
    return counts / M, x, y


def picard_iterate(lam: float, mu: float, initial, M: int, horizon: float, *,
                   n_grid: int = 1000, tol: float = 1e-3, max_iter: int = 20,
                   seed: int = 0, strict: bool = True) -> PicardResult:
    """Fixed-point iteration on p(t) with an ensemble of M particles.

    Starts from the constant P(x(0) > 0) and stops once
    sup_t |p^{k+1} - p^k| < tol + 3 / sqrt(M).  With ``strict`` a
    ``PicardNonConvergence`` carrying the residual sequence is raised when
    ``max_iter`` is exhausted.
    """
    if M < 1000:
        raise ValueError("need at least 1000 particles")
    if tol <= 0:
        raise ValueError("tol must be positive")
    weights = initial.weights if isinstance(initial, DiscreteMeasure) else initial
    p0 = sum(w for (x, _), w in weights.items() if x > 0) / sum(weights.values())
    p = np.full(n_grid + 1, p0)
    floor = 3.0 / math.sqrt(M)
    residuals = []
    converged = False
    x = y = None
    for k in range(max_iter):
        p_new, x, y = run_particles(lam, mu, initial, p, horizon, M, seed)
        res = float(np.max(np.abs(p_new - p)))
        residuals.append(res)
        p = p_new
        if res < tol + floor:
            converged = True
            break
    ens = ParticleEnsemble(x, y, p, horizon / n_grid, len(residuals))
    result = PicardResult(np.linspace(0, horizon, n_grid + 1), p, residuals, converged, floor, ens)
    if not converged and strict:
        raise PicardNonConvergence(result)
    return result


# ---------------------------------------------------------- generating function

def adaptive_simpson(f, a: float, b: float, tol: float = 1e-9, max_depth: int = 50) -> float:
    if b <= a:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4 * frm + fb)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15 * tol:
            return left + right + delta / 15.0
        return (rec(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    return rec(a, b, fa, fm, fb, whole, tol, max_depth)


class _PiecewiseLinear:
    """p given as a table, linearly interpolated, with an exact running integral."""

    def __init__(self, ts, vs):
        self.ts = np.asarray(ts, dtype=float)
        self.vs = np.asarray(vs, dtype=float)
        seg = 0.5 * (self.vs[1:] + self.vs[:-1]) * np.diff(self.ts)
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])

    def integral(self, s: float) -> float:
        ts, vs = self.ts, self.vs
        if s <= ts[0]:
            return 0.0
        if s >= ts[-1]:
            return float(self.cum[-1] + vs[-1] * (s - ts[-1]))
        j = int(np.searchsorted(ts, s, side="right")) - 1
        a = s - ts[j]
        slope = (vs[j + 1] - vs[j]) / (ts[j + 1] - ts[j])
        return float(self.cum[j] + vs[j] * a + 0.5 * slope * a * a)


def generating_function(r2: int, t: float, u: float, p, lam: float, mu: float,
                        tol: float = 1e-9) -> float:
    """E[u^(x(t) + y(t))] for the limit process started from (0, r2).

    ``p`` is a callable on [0, t] or a ``(times, values)`` table, which is
    interpolated linearly.  Integrals use adaptive Simpson to absolute
    tolerance ``tol``.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return float(u ** r2)
    if callable(p):
        def P(s):
            return adaptive_simpson(p, 0.0, s, tol * 1e-2)
    else:
        P = _PiecewiseLinear(*p).integral
    c = lam * (1.0 - u)
    Pt = P(t)
    first = math.exp(-mu * t) * u ** r2 * math.exp(-c * Pt)
    if c == 0.0:
        return first + (1.0 - math.exp(-mu * t))

    def integrand(s):
        return math.exp(-c * (Pt - P(t - s))) * mu * math.exp(-mu * s)

    return first + adaptive_simpson(integrand, 0.0, t, tol)


def history_to_json(h: FPHistory) -> str:
    return json.dumps({"lam": h.lam, "mu": h.mu, "t": h.times.tolist(), "p": h.p.tolist(),
                       "m1": h.m1.tolist(), "m2": h.m2.tolist()})
