import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from replidecay.mean_field import (GridOverflow, PicardNonConvergence, adaptive_simpson,
                                   boundary_mass, fp_generator_apply, fp_solve,
                                   generating_function, moments, p_of, picard_iterate,
                                   poisson_r2_law, run_particles)
from replidecay.spectral_decay import decay_bound_constants, kappa2


def point(x, y, K=6):
    q = np.zeros((K + 1, K + 1))
    q[x, y] = 1.0
    return q


# ---------------------------------------------------------------- generator

def test_generator_absorbing_point():
    dq = fp_generator_apply(point(0, 0), 0.0, 2.0, 1.0)
    assert np.all(dq == 0)


def test_generator_reset_only():
    dq = fp_generator_apply(point(1, 0), 1.0, 0.0, 1.0)
    expected = np.zeros_like(dq)
    expected[1, 0], expected[0, 0] = -1.0, 1.0
    assert np.array_equal(dq, expected)


def test_generator_moment_rates_at_zero_two():
    q = point(0, 2)
    dq = fp_generator_apply(q, 0.0, 0.0, 1.0)
    K = q.shape[0] - 1
    k = np.arange(K + 1)
    dm1 = k @ dq.sum(axis=1)
    dm2 = k @ dq.sum(axis=0)
    assert dm2 == pytest.approx(-4.0)       # m2' = -2 mu m2
    assert dm1 == pytest.approx(2.0)        # m1' = mu (m2 - m1)
    assert dm1 + dm2 == pytest.approx(-2.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1), st.floats(0, 5), st.floats(0.1, 3))
def test_generator_conserves_mass_and_matches_moment_ode(seed, p, lam, mu):
    rng = np.random.default_rng(seed)
    q = np.zeros((9, 9))
    q[:5, :5] = rng.random((5, 5))
    q /= q.sum()
    dq = fp_generator_apply(q, p, lam, mu)
    assert abs(dq.sum()) < 1e-12
    # away from the boundary the generator reproduces the moment equations (with exogenous p)
    k = np.arange(9)
    m1, m2 = moments(q)
    px = 1 - q[0].sum()
    assert k @ dq.sum(axis=1) == pytest.approx(-lam * px + mu * (m2 - m1), abs=1e-10)
    assert k @ dq.sum(axis=0) == pytest.approx(lam * px + lam * p - 2 * mu * m2, abs=1e-10)


def test_generator_overflow_flag():
    q = point(0, 6)
    with pytest.raises(GridOverflow):
        fp_generator_apply(q, 1.0, 1.0, 1.0, overflow_tol=1e-10)
    with pytest.raises(ValueError):
        fp_generator_apply(q, 1.5, 1.0, 1.0)


# ---------------------------------------------------------------- forward equation

def test_fp_stationary_point():
    h = fp_solve(1.0, 1.0, {(0, 0): 1.0}, np.linspace(0, 3, 7))
    assert np.all(h.p == 0) and np.all(h.m1 == 0) and np.all(h.m2 == 0)


def test_fp_lambda_zero_closed_form():
    t = np.linspace(0, 5, 51)
    h = fp_solve(0.0, 1.0, {(0, 2): 1.0}, t)
    assert np.max(np.abs(h.m2 - 2 * np.exp(-2 * t))) < 1e-6
    assert np.max(np.abs(h.m1 - 2 * (np.exp(-t) - np.exp(-2 * t)))) < 1e-6


def test_fp_mu_scaling():
    # time rescaling: (lam, mu) at time t equals (lam/mu, 1) at time mu t
    t = np.linspace(0, 2, 9)
    a = fp_solve(1.0, 2.0, {(1, 1): 1.0}, t, keep_grids=False)
    b = fp_solve(0.5, 1.0, {(1, 1): 1.0}, 2 * t, keep_grids=False)
    assert np.max(np.abs(a.p - b.p)) < 1e-9


def test_fp_invariants_and_moment_ode():
    t = np.linspace(0, 1, 1001)
    lam, mu = 1.3, 0.9
    h = fp_solve(lam, mu, poisson_r2_law(3.0), t)
    assert np.max(np.abs(h.mass - 1)) < 1e-10
    assert all(np.all(g >= 0) for g in h.grids)
    assert all(boundary_mass(g) <= 1e-10 for g in h.grids)
    dt = t[1] - t[0]
    d5 = lambda f: (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * dt)
    dm1, dm2 = d5(h.m1), d5(h.m2)
    p, m1, m2 = h.p[2:-2], h.m1[2:-2], h.m2[2:-2]
    assert np.max(np.abs(dm1 + lam * p - mu * (m2 - m1))) < 1e-6
    assert np.max(np.abs(dm2 - 2 * lam * p + 2 * mu * m2)) < 1e-6
    g = h.m1 - h.p
    assert np.all(g >= -1e-12) and np.all(g <= h.m1 + 1e-12)


def test_fp_grows_truncation_bound():
    h = fp_solve(6.0, 1.0, {(0, 1): 1.0}, np.linspace(0, 4, 5), K0=4)
    assert h.final.K > 4 and h.k_growths
    assert np.max(np.abs(h.mass - 1)) < 1e-10
    with pytest.raises(GridOverflow):
        fp_solve(6.0, 1.0, {(0, 1): 1.0}, np.linspace(0, 4, 5), K0=4, K_max=6)


def test_fp_bad_inputs():
    with pytest.raises(ValueError):
        fp_solve(1.0, 1.0, {(0, 1): 0.5}, [0, 1])
    with pytest.raises(ValueError):
        fp_solve(1.0, 1.0, {(0, 1): 1.0}, [1, 0])


@pytest.mark.parametrize("rho", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("start", [(1, 0), (2, 1), (3, 2)])
def test_decay_bound_where_it_applies(rho, start):
    t = np.linspace(0, 10, 101)
    h = fp_solve(rho, 1.0, {start: 1.0}, t, keep_grids=False)
    lit, corr, applies = decay_bound_constants(rho, *start)
    assert applies
    assert np.min(lit * np.exp(-kappa2(rho).kappa_plus * t) - h.L) >= -1e-8


@pytest.mark.parametrize("rho", [0.0, 0.5, 1.0, 2.0])
def test_decay_bound_literal_fails_from_two_copies_but_corrected_holds(rho):
    t = np.linspace(0, 10, 101)
    h = fp_solve(rho, 1.0, {(0, 2): 1.0}, t, keep_grids=False)
    lit, corr, applies = decay_bound_constants(rho, 0.0, 2.0)
    rate = kappa2(rho).kappa_plus
    assert not applies
    assert np.min(lit * np.exp(-rate * t) - h.L) < -1e-3
    assert np.min(corr * np.exp(-rate * t) - h.L) >= -1e-8


def test_total_mass_identity_L_derivative():
    # dL/dt = -mu m1 holds for every lambda since duplication conserves x + y/2
    t = np.linspace(0, 2, 2001)
    h = fp_solve(2.0, 1.0, {(0, 2): 1.0}, t, keep_grids=False)
    dL = np.gradient(h.L, t)
    assert np.max(np.abs(dL[1:-1] + h.m1[1:-1])) < 1e-5


def test_fp_csv(tmp_path):
    h = fp_solve(1.0, 1.0, {(0, 2): 1.0}, np.linspace(0, 1, 3))
    h.write_csv(tmp_path / "fp.csv")
    lines = (tmp_path / "fp.csv").read_text().splitlines()
    assert lines[0] == "t,p,m1,m2,L" and len(lines) == 4
    assert h.snapshot_json(0) == "[[[0, 2], 1.0]]"


# ---------------------------------------------------------------- particles

def test_picard_lambda_zero_settles_after_one_update():
    r = picard_iterate(0.0, 1.0, {(0, 2): 1.0}, 2000, 2.0, n_grid=200, max_iter=5)
    assert r.converged
    assert len(r.residuals) <= 2
    if len(r.residuals) == 2:
        assert r.residuals[1] == 0.0


def test_picard_zero_state():
    r = picard_iterate(1.0, 1.0, {(0, 0): 1.0}, 1000, 2.0, n_grid=100)
    assert r.converged and np.all(r.p == 0) and r.residuals == [0.0]


def test_picard_agrees_with_fp_small():
    law = {(0, 2): 1.0}
    r = picard_iterate(1.0, 1.0, law, 20000, 3.0, n_grid=300, max_iter=10)
    h = fp_solve(1.0, 1.0, law, r.times, keep_grids=False)
    assert np.max(np.abs(r.p - h.p)) < 0.02
    assert r.residuals[-1] < 1e-3 + 3 / math.sqrt(20000)
    # one more iteration from the fixed point moves p by less than the floor
    p_next, _, _ = run_particles(1.0, 1.0, law, r.p, 3.0, 20000, 0)
    assert np.max(np.abs(p_next - r.p)) < 1e-3 + r.noise_floor


def test_particles_lambda_zero_match_closed_form():
    G = 100
    p, x, y = run_particles(0.0, 1.0, {(0, 2): 1.0}, np.zeros(G + 1), 2.0, 40000, 3)
    t = np.linspace(0, 2, G + 1)
    # x > 0 iff this copy survives and at least one of the two partners has failed
    exact = np.exp(-t) * (1 - np.exp(-2 * t))
    assert np.max(np.abs(p - exact)) < 0.01


def test_picard_nonconvergence_reports_residuals():
    with pytest.raises(PicardNonConvergence) as e:
        picard_iterate(3.0, 1.0, {(0, 2): 1.0}, 1000, 3.0, n_grid=50, tol=1e-9, max_iter=1)
    assert len(e.value.result.residuals) == 1
    with pytest.raises(ValueError):
        picard_iterate(1.0, 1.0, {(0, 2): 1.0}, 10, 1.0)


# ---------------------------------------------------------------- generating function

def test_adaptive_simpson():
    assert adaptive_simpson(math.sin, 0, math.pi) == pytest.approx(2.0, abs=1e-10)
    assert adaptive_simpson(lambda s: math.exp(-s), 0, 5) == pytest.approx(1 - math.exp(-5), abs=1e-10)


def test_generating_function_trivial_cases():
    p = lambda s: 0.3
    assert generating_function(2, 1.5, 1.0, p, 1.0, 1.0) == 1.0
    assert generating_function(3, 0.0, 0.4, p, 1.0, 1.0) == pytest.approx(0.4 ** 3)
    t, u = 1.2, 0.35
    exact = math.exp(-t) * u ** 2 + 1 - math.exp(-t)
    assert generating_function(2, t, u, p, 0.0, 1.0) == pytest.approx(exact, abs=1e-12)
    with pytest.raises(ValueError):
        generating_function(2, 1.0, 1.5, p, 1.0, 1.0)


def test_generating_function_constant_p_closed_form():
    # constant p: inner integral is p s, so the second term has a closed form
    lam, mu, p0, t, u, r2 = 1.5, 0.8, 0.4, 2.0, 0.6, 3
    c = lam * (1 - u) * p0
    exact = (math.exp(-mu * t) * u ** r2 * math.exp(-c * t)
             + mu / (mu + c) * (1 - math.exp(-(mu + c) * t)))
    assert generating_function(r2, t, u, lambda s: p0, lam, mu) == pytest.approx(exact, abs=1e-9)
    tab = (np.linspace(0, 3, 31), np.full(31, p0))
    assert generating_function(r2, t, u, tab, lam, mu) == pytest.approx(exact, abs=1e-9)


def test_generating_function_against_fp_law():
    t = np.linspace(0, 3, 301)
    h = fp_solve(1.0, 1.0, {(0, 2): 1.0}, t)
    for j in (100, 300):
        for u in (0.0, 0.5, 0.9):
            g = generating_function(2, t[j], u, h.p_table(), 1.0, 1.0)
            assert abs(g - h.pgf(j, u)) < 5e-4
        # derivative at u = 1 gives E[x + y]
        eps = 1e-5
        g1 = generating_function(2, t[j], 1 - eps, h.p_table(), 1.0, 1.0, tol=1e-13)
        assert (1 - g1) / eps == pytest.approx(h.m1[j] + h.m2[j], abs=1e-4)


def test_poisson_law_normalized():
    law = poisson_r2_law(4.0)
    assert sum(law.values()) == pytest.approx(1.0, abs=1e-15)
    assert sum(y * w for (_, y), w in law.items()) == pytest.approx(4.0, abs=1e-12)
    assert p_of(point(0, 3)) == 0.0
