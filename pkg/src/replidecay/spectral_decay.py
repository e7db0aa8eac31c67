"""Decay-rate analytics: quadratic rates for d=2, the tridiagonal mean matrix
for general d, its spectrum by Sturm bisection, closed-form means and
empirical rate fitting.

All rates are in units of ``mu`` unless a function takes ``mu`` explicitly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class DecayRates2:
    rho: float
    kappa_plus: float
    kappa_minus: float
    y_plus: float
    y_minus: float


def kappa2(rho: float) -> DecayRates2:
    """Negated roots of x^2 + (3 + rho) x + 2 = 0, slow root first."""
    if rho < 0:
        raise ValueError("rho must be >= 0")
    b = 3.0 + rho
    kappa_minus = 0.5 * (b + math.sqrt(b * b - 8.0))
    # product of the roots is 2; dividing avoids cancellation in the slow root
    kappa_plus = 2.0 / kappa_minus
    return DecayRates2(rho, kappa_plus, kappa_minus, rho + 1.0 - kappa_plus, rho + 1.0 - kappa_minus)


def decay_bound_constants(rho: float, m1: float, m2: float) -> tuple[float, float, bool]:
    """Constants C with m1(t) + m2(t)/2 <= C exp(-mu kappa_plus t) for the d=2 mean-field law.

    Returns ``(m1 + m2/2, corrected, applies)``.  The first constant is valid
    only when ``applies`` (m2 <= y_plus m1, i.e. the fast mode enters with a
    non-negative coefficient).  ``corrected`` is valid for every start and
    equals the first one whenever ``applies``.
    """
    r = kappa2(rho)
    h1 = (m2 - r.y_minus * m1) / (r.y_plus - r.y_minus)
    h2 = (r.y_plus * m1 - m2) / (r.y_plus - r.y_minus)
    corrected = (1 + r.y_plus / 2) * h1 + max(0.0, (1 + r.y_minus / 2) * h2)
    return m1 + 0.5 * m2, corrected, m2 <= r.y_plus * m1


def build_M(d: int, rho: float) -> np.ndarray:
    """Tridiagonal d x d generator of the mean vector of the dominating limit."""
    if d < 1:
        raise ValueError("d must be >= 1")
    if rho < 0:
        raise ValueError("rho must be >= 0")
    m = np.zeros((d, d))
    for k in range(1, d + 1):
        i = k - 1
        m[i, i] = -k * (rho + 1.0) if k < d else -float(d)
        if k > 1:
            m[i, i - 1] = k * rho
        if k < d:
            m[i, i + 1] = k
    return m


def symmetric_tridiagonal(d: int, rho: float) -> tuple[np.ndarray, np.ndarray]:
    """(diagonal, off-diagonal) of the symmetrized matrix; off-diagonal is sqrt(k(k+1) rho)."""
    diag = np.diag(build_M(d, rho)).copy()
    k = np.arange(1, d, dtype=float)
    return diag, np.sqrt(k * (k + 1.0) * rho)


def symmetrize(M: np.ndarray, d: int, rho: float) -> np.ndarray:
    """Symmetric matrix with the same eigenvalues as ``M`` (the diagonal similarity transform).

    For ``rho == 0`` the matrix is triangular; the diagonal matrix of its
    diagonal is returned, which carries the same eigenvalues.
    """
    if rho <= 0:
        return np.diag(np.diag(M))
    k = np.arange(1, d + 1, dtype=float)
    # D_k = 1 / sqrt(k rho^(k-1)), computed in logs to stay finite for large d
    log_dk = -0.5 * (np.log(k) + (k - 1) * math.log(rho))
    s = np.exp(log_dk[:, None] - log_dk[None, :]) * M
    return 0.5 * (s + s.T)


def sturm_count(diag: np.ndarray, off: np.ndarray, x: float) -> int:
    """Number of eigenvalues strictly below ``x`` (negative pivots of T - xI = L D L^T)."""
    count = 0
    q = diag[0] - x
    tiny = 1e-300
    if q < 0:
        count += 1
    for k in range(1, len(diag)):
        if q == 0.0:
            q = tiny
        q = diag[k] - x - off[k - 1] * off[k - 1] / q
        if q < 0:
            count += 1
    return count


def gershgorin(diag: np.ndarray, off: np.ndarray) -> tuple[float, float]:
    r = np.zeros(len(diag))
    r[:-1] += np.abs(off)
    r[1:] += np.abs(off)
    return float(np.min(diag - r)), float(np.max(diag + r))


def bisect_eigenvalues(diag: np.ndarray, off: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """All eigenvalues of a symmetric tridiagonal matrix, ascending."""
    diag = np.asarray(diag, dtype=float)
    off = np.asarray(off, dtype=float)
    n = len(diag)
    if n == 1:
        return diag.copy()
    lo0, hi0 = gershgorin(diag, off)
    pad = 1e-12 * max(1.0, abs(lo0), abs(hi0))
    lo0, hi0 = lo0 - pad, hi0 + pad
    if sturm_count(diag, off, lo0) != 0 or sturm_count(diag, off, hi0) != n:
        raise RuntimeError("Gershgorin bracket does not contain the spectrum")
    out = np.empty(n)
    for k in range(n):
        lo, hi = lo0, hi0
        for _ in range(400):
            mid = 0.5 * (lo + hi)
            if sturm_count(diag, off, mid) > k:
                hi = mid
            else:
                lo = mid
            if hi - lo <= rtol * max(abs(lo), abs(hi)) + 1e-300:
                break
        else:
            raise RuntimeError(f"bisection did not converge for eigenvalue {k}")
        out[k] = 0.5 * (lo + hi)
    return out


def kappa_bar(d: int, rho: float) -> float:
    """Analytic upper bound 1 / sum_{k=1..d} rho^(k-1) / k on the slowest rate."""
    return 1.0 / sum(rho ** (k - 1) / k for k in range(1, d + 1))


@dataclass
class SpectralResult:
    d: int
    rho: float
    matrix: np.ndarray
    eigenvalues: np.ndarray
    kappa_d_plus: float
    kappa_bar: float

    def to_dict(self) -> dict:
        return {"d": self.d, "rho": self.rho, "eigenvalues": [float(v) for v in self.eigenvalues],
                "kappa_d_plus": self.kappa_d_plus, "kappa_bar": self.kappa_bar}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def spectrum(d: int, rho: float, rtol: float = 1e-12) -> SpectralResult:
    m = build_M(d, rho)
    if rho == 0:
        eig = np.sort(np.diag(m))
    else:
        diag, off = symmetric_tridiagonal(d, rho)
        eig = bisect_eigenvalues(diag, off, rtol)
    return SpectralResult(d, rho, m, eig, float(-eig[-1]), kappa_bar(d, rho))


def _rk4_propagator(m: np.ndarray, h: float) -> np.ndarray:
    a = h * m
    a2 = a @ a
    a3 = a2 @ a
    return np.eye(len(m)) + a + a2 / 2.0 + a3 / 6.0 + a3 @ a / 24.0


def solve_V(d: int, rho: float, V0, t_grid, safety: float = 0.02) -> np.ndarray:
    """RK4 solution of V' = M V on ``t_grid`` (time in units of 1/mu).

    The step is at most ``safety / ||M||_inf``; each output interval is split
    into equal steps.  Returns an array of shape (len(t_grid), d).
    """
    m = build_M(d, rho)
    v = np.asarray(V0, dtype=float).copy()
    if v.shape != (d,):
        raise ValueError(f"V0 must have length {d}")
    if np.any(v < 0):
        raise ValueError("V0 must be non-negative")
    t_grid = np.asarray(t_grid, dtype=float)
    h_max = safety / np.abs(m).sum(axis=1).max()
    out = np.empty((len(t_grid), d))
    t = 0.0
    cache: dict[int, np.ndarray] = {}
    for j, target in enumerate(t_grid):
        span = target - t
        if span < 0:
            raise ValueError("t_grid must be non-decreasing and start at >= 0")
        if span > 0:
            n = max(1, math.ceil(span / h_max - 1e-9))
            key = (n, round(span, 15))
            prop = cache.get(key)
            if prop is None:
                prop = cache[key] = _rk4_propagator(m, span / n)
            for _ in range(n):
                v = prop @ v
            t = target
        out[j] = v
    return out


def solve_V_d2(rho: float, V0, t) -> np.ndarray:
    """Closed-form solution of the d=2 mean ODE (units of 1/mu), shape (len(t), 2)."""
    r = kappa2(rho)
    v1, v2 = V0
    a = (v2 - r.y_minus * v1) / (r.y_plus - r.y_minus)
    b = (r.y_plus * v1 - v2) / (r.y_plus - r.y_minus)
    t = np.asarray(t, dtype=float)
    ep, em = np.exp(-r.kappa_plus * t), np.exp(-r.kappa_minus * t)
    return np.stack([a * ep + b * em, a * r.y_plus * ep + b * r.y_minus * em], axis=-1)


def eigen_bound_constant(d: int, rho: float, V0) -> float:
    """K0 with V_k(t) <= K0 exp(-kappa_d_plus t) for all k, t >= 0.

    From V(t) = sum_j c_j v_j exp(lambda_j t) and lambda_j <= -kappa_d_plus:
    K0 = max_k sum_j |c_j v_{j,k}|.
    """
    m = build_M(d, rho)
    lam, vecs = np.linalg.eig(m)
    lam, vecs = lam.real, vecs.real
    c = np.linalg.solve(vecs, np.asarray(V0, dtype=float))
    return float(np.max(np.abs(vecs * c[None, :]).sum(axis=1)))


def corollary_closed_form(rho: float, r2: float, mu: float, t):
    """(E T1(t), E T2(t)) for d=2 started from (0, r2).

    Uses the denominator kappa_minus - kappa_plus, which keeps both
    expectations non-negative and agrees with the mean ODE.
    """
    r = kappa2(rho)
    t = np.asarray(t, dtype=float)
    ep = np.exp(-mu * r.kappa_plus * t)
    em = np.exp(-mu * r.kappa_minus * t)
    c = r2 / (r.kappa_minus - r.kappa_plus)
    return c * (ep - em), c * (r.y_plus * ep - r.y_minus * em)


def fit_decay_rate(t, values, window=0.4) -> tuple[float, float]:
    """Least-squares exponential rate on the tail of a series.

    ``window`` is either the fraction of trailing samples to use or an
    explicit ``(t_lo, t_hi)`` interval.  Returns ``(rate, r_squared)`` where
    rate is minus the slope of log(value) against t.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(values, dtype=float)
    if isinstance(window, tuple):
        sel = (t >= window[0]) & (t <= window[1])
    else:
        if not 0 < window <= 1:
            raise ValueError("window fraction must lie in (0, 1]")
        n_tail = max(1, int(round(window * len(t))))
        sel = np.zeros(len(t), dtype=bool)
        sel[len(t) - n_tail:] = True
    tw, yw = t[sel], y[sel]
    if len(tw) < 10:
        raise ValueError(f"need at least 10 points in the fit window, got {len(tw)}")
    if np.any(yw <= 0):
        raise ValueError("values must be positive on the fit window")
    ly = np.log(yw)
    slope, intercept = np.polyfit(tw, ly, 1)
    resid = ly - (slope * tw + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return float(-slope), r2


class Figure3Row(NamedTuple):
    d: int
    rho: float
    kappa_bar: float
    kappa_plus: float
    ratio: float


def figure3_table(d_list, rho_list) -> list[Figure3Row]:
    rows = []
    for d in d_list:
        for rho in rho_list:
            s = spectrum(int(d), float(rho))
            rows.append(Figure3Row(int(d), float(rho), s.kappa_bar, s.kappa_d_plus,
                                   s.kappa_bar / s.kappa_d_plus))
    return rows


def write_figure3_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "rho", "kappa_bar", "kappa_plus", "ratio"])
        for r in rows:
            w.writerow([r.d, format(r.rho, ".12g"), format(r.kappa_bar, ".15g"),
                        format(r.kappa_plus, ".15g"), format(r.ratio, ".15g")])
