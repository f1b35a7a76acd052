"""Exact filter: Riccati drift/flow, co-simulated runs, semigroup E."""
import math

import numpy as np
import pytest

from conftest import random_model, random_psd, scalar_lg
from kbflow import (
    LinearGaussianModel,
    ScalarModel,
    TimeGrid,
    check_riccati_sandwich,
    contraction_rate,
    kalman_run,
    ricc_drift,
    riccati_flow,
    semigroup_E,
    slope_fit,
    solve_are,
)


def test_ricc_drift_examples():
    m = scalar_lg(A=0.0)
    np.testing.assert_allclose(ricc_drift(m, [[1.0]]), [[0.0]], atol=1e-14)
    m20 = scalar_lg(A=20.0)
    np.testing.assert_allclose(ricc_drift(m20, [[0.0]]), [[1.0]], atol=1e-14)


def test_ricc_drift_matches_dense_arithmetic():
    m = random_model(2, seed=4)
    P = random_psd(2, seed=5)
    direct = m.A @ P + P @ m.A.T - P @ m.S @ P + m.R
    direct = 0.5 * (direct + direct.T)
    np.testing.assert_allclose(ricc_drift(m, P), direct, atol=1e-12)


def test_riccati_flow_fixed_point():
    m = scalar_lg(A=0.0)
    states = riccati_flow(m, [[1.0]], TimeGrid(0.0, 0.01, 200))
    for s in states:
        assert abs(s.P[0, 0] - 1.0) < 1e-10


def test_riccati_flow_tanh():
    # A=0, R=S=1, Q=0: P_t = tanh(t)
    m = scalar_lg(A=0.0)
    grid = TimeGrid(0.0, 0.01, 200)
    states = riccati_flow(m, [[0.0]], grid)
    by_t = {round(s.t, 6): s.P[0, 0] for s in states}
    for t in (0.5, 1.0, 2.0):
        assert abs(by_t[t] - math.tanh(t)) < 1e-7


def test_riccati_flow_reaches_stiff_fixed_point():
    m = scalar_lg(A=20.0)
    states = riccati_flow(m, [[0.0]], TimeGrid(0.0, 1e-3, 1000))
    assert abs(states[-1].P[0, 0] - (20 + math.sqrt(401))) < 1e-8


def test_riccati_flow_emits_psd_states():
    m = random_model(3, seed=8)
    for s in riccati_flow(m, np.zeros((3, 3)), TimeGrid(0.0, 0.01, 100)):
        np.testing.assert_allclose(s.P, s.P.T, atol=1e-10)
        assert np.linalg.eigvalsh(s.P)[0] >= -1e-10 * (1 + np.linalg.norm(s.P))


def test_riccati_flow_monotone_in_initial_condition():
    m = random_model(2, seed=14)
    rng = np.random.default_rng(15)
    grid = TimeGrid(0.0, 0.01, 100)
    for trial in range(5):
        Q1 = random_psd(2, seed=100 + trial)
        Q2 = Q1 + random_psd(2, seed=200 + trial)  # Q1 <= Q2
        flow1 = riccati_flow(m, Q1, grid)
        flow2 = riccati_flow(m, Q2, grid)
        for s1, s2 in zip(flow1[::10], flow2[::10]):
            gap = np.linalg.eigvalsh(s2.P - s1.P)[0]
            assert gap >= -1e-8


def test_flow_differences_contract_at_twice_the_rate():
    # scalar: |phi_t(Q1) - phi_t(Q2)| decays like e^{-2 sqrt(A^2+RS) t}
    sm_A = 1.0
    m = scalar_lg(A=sm_A)
    rate = math.sqrt(sm_A ** 2 + 1)
    grid = TimeGrid(0.0, 0.01, 300)
    f1 = riccati_flow(m, [[0.5]], grid)
    f2 = riccati_flow(m, [[4.0]], grid)
    ts = np.array([s.t for s in f1])
    diff = np.array([abs(a.P[0, 0] - b.P[0, 0]) for a, b in zip(f1, f2)])
    sel = ts >= 1.0  # past the nonlinear transient
    slope, _ = slope_fit(ts[sel], np.log(diff[sel]))
    assert slope == pytest.approx(-2 * rate, rel=0.1)


def test_kalman_run_noiseless_exact_init():
    # no signal noise, tiny sensor noise, truth pinned at the filter mean
    m = LinearGaussianModel([[0.0]], [[1.0]], [[0.0]], [[1e-6]])
    out = kalman_run(m, x0=[0.0], Q=[[0.0]], truth_seed=0,
                     grid=TimeGrid(0.0, 1e-3, 200), m0=[0.0], P0=[[0.0]])
    for s in out:
        assert abs(s.Z[0]) < 1e-9


def test_kalman_run_stationary_error_variance():
    # error Z is stationary OU-like with variance P_inf
    m = scalar_lg(A=-1.0)
    P_inf = solve_are(m).P[0, 0]
    grid = TimeGrid(0.0, 0.01, 2000)
    out = kalman_run(m, x0=[0.0], Q=[[P_inf]], truth_seed=11, grid=grid)
    z = np.array([s.Z[0] for s in out])
    tail = z[len(z) // 2:]
    v = tail.var()
    # effective sample count is reduced by autocorrelation (time constant
    # ~ 1/(2 rate)); budget 3 MC sigmas on that basis
    rate = contraction_rate(ScalarModel(A=-1.0, R=1.0, S=1.0))
    n_eff = (len(tail) * grid.dt) * 2 * rate / 2
    assert abs(v - P_inf) < 3 * P_inf * math.sqrt(2 / n_eff)


def test_kalman_run_mean_error_decays():
    # filter started offset from the truth mean: E[Z_t] decays like c e^{-a t}
    m = scalar_lg(A=-1.0)
    offset = 1.0
    grid = TimeGrid(0.0, 0.01, 200)  # t = 2
    trials = 300
    zs = np.array([
        kalman_run(m, x0=[offset], Q=[[1.0]], truth_seed=seed, grid=grid)[-1].Z[0]
        for seed in range(trials)
    ])
    rate = contraction_rate(ScalarModel(A=-1.0, R=1.0, S=1.0))
    envelope = offset * math.exp(-rate * grid.horizon) + 3 * zs.std() / math.sqrt(trials)
    assert abs(zs.mean()) < envelope
    assert abs(zs.mean()) < offset / 2  # the offset has visibly decayed


def test_semigroup_identity_at_s_equals_t():
    m = random_model(2, seed=6)
    E = semigroup_E(m, random_psd(2, seed=7), 1.0, 1.0)
    np.testing.assert_allclose(E.E, np.eye(2), atol=1e-12)


def test_semigroup_scalar_rate_at_fixed_point():
    for A in (1.0, 20.0):
        m = scalar_lg(A=A)
        P_inf = solve_are(m).P
        rate = math.sqrt(A ** 2 + 1)
        for t in (0.1, 1.0):
            E = semigroup_E(m, P_inf, 0.0, t)
            assert abs(E.E[0, 0] - math.exp(-t * rate)) < 1e-8


def test_semigroup_cocycle():
    m = random_model(2, seed=9)
    Q = random_psd(2, seed=10)
    E_02 = semigroup_E(m, Q, 0.0, 2.0).E
    E_01 = semigroup_E(m, Q, 0.0, 1.0).E
    E_12 = semigroup_E(m, Q, 1.0, 2.0).E
    np.testing.assert_allclose(E_02, E_12 @ E_01, atol=1e-7)


def test_semigroup_determinant_identity():
    # det E_t(Q) = exp(int_0^t Tr(A - phi_s S) ds)
    m = random_model(2, seed=16)
    Q = random_psd(2, seed=17)
    E = semigroup_E(m, Q, 0.0, 1.5)
    assert np.linalg.det(E.E) == pytest.approx(math.exp(E.trace_integral), rel=1e-7)


def test_riccati_sandwich_scalar():
    m = scalar_lg(A=0.0)
    report = check_riccati_sandwich(m, [[5.0]], tau=1.0, t=2.0)
    assert report.ok
    assert all(v >= -1e-8 for v in report.margins.values())


def test_riccati_sandwich_at_fixed_point():
    m = scalar_lg(A=1.0)
    P_inf = solve_are(m).P
    report = check_riccati_sandwich(m, P_inf, tau=1.0, t=2.0)
    assert report.ok
    # the fixed-point upper bound is tight at Q = P_inf
    assert report.margins["upper_fixed_point"] == pytest.approx(0.0, abs=1e-7)


def test_riccati_sandwich_random_models():
    for seed in range(100):
        m = random_model(2, seed=3000 + seed)
        Q = random_psd(2, seed=4000 + seed, scale=2.0)
        report = check_riccati_sandwich(m, Q, tau=1.0, t=2.0)
        assert report.ok, (seed, report.margins)


def test_sandwich_validates_times():
    with pytest.raises(ValueError):
        check_riccati_sandwich(scalar_lg(), [[1.0]], tau=2.0, t=1.0)
