"""Monte Carlo lab tests pinned against closed-form trajectory oracles."""

import math
import os

import numpy as np
import pytest

from cocycle_lab import (
    Direction,
    EnsembleSpec,
    SeedPath,
    approx_coefficients,
    contraction_tail,
    increments,
    product_range,
    simulate,
    variance_profile,
)
from cocycle_lab.mclab import (
    TrajectoryStats,
    log_linear_fit,
    resolve_workers,
    write_samples_csv,
    write_stats_csv,
)

A_ROT = 2.0
LYAP = math.log((A_ROT + 1.0 / A_ROT) / 2.0)  # 0.22314355131420976
STEP_VAR = 0.1994791336716678  # Var ln||D u(theta)||, theta uniform

IID = EnsembleSpec(family="iid_sl2_rotation", dim=2, params={"a": A_ROT})


def rotation(theta: float) -> list[list[float]]:
    c, s = math.cos(theta), math.sin(theta)
    return [[c, -s], [s, c]]


# ----------------------------------------------------------- exact oracles


def test_scalar_family_mean_exact_var_zero():
    # g = 2 O with O orthogonal, so S_n = n ln 2 for every trajectory.
    spec = EnsembleSpec(family="contracting_norm", dim=2,
                        params={"scale": {"fixed": 2.0}})
    st = simulate(spec, None, [1, 5, 20], m=500, seed=1)
    for i, n in enumerate(st.n_grid):
        assert st.mean[i] == pytest.approx(n * math.log(2.0), abs=1e-12)
        assert st.var[i] <= 1e-24
        assert np.allclose(st.samples[i], n * math.log(2.0), atol=1e-12)


def test_fixed_rotation_cycle_is_flat_zero():
    spec = EnsembleSpec(family="contracting_norm", dim=2,
                        params={"matrix_cycle": [rotation(0.7)]})
    st = simulate(spec, None, [1, 3, 17], m=50, seed=2)
    assert np.max(np.abs(st.samples)) <= 1e-12
    assert np.max(np.abs(st.mean)) <= 1e-12


def test_alternating_inverse_cycle_two_point_values():
    # cycle A, A^{-1}: every even prefix collapses to the identity.
    A = [[2.0, 0.0], [0.0, 0.5]]
    A_inv = [[0.5, 0.0], [0.0, 2.0]]
    spec = EnsembleSpec(family="contracting_norm", dim=2,
                        params={"matrix_cycle": [A, A_inv]})
    st = simulate(spec, [1.0, 0.0], [1, 2, 3, 4, 7, 8], m=10, seed=3)
    expect = {1: math.log(2.0), 2: 0.0, 3: math.log(2.0), 4: 0.0,
              7: math.log(2.0), 8: 0.0}
    for i, n in enumerate(st.n_grid):
        assert st.mean[i] == pytest.approx(expect[n], abs=1e-12)
        assert st.var[i] <= 1e-24


def test_iid_rotation_matches_lyapunov_and_variance():
    grid = [16, 64, 256]
    m = 20000
    st = simulate(IID, None, grid, m=m, seed=11)
    for i, n in enumerate(grid):
        se = math.sqrt(STEP_VAR * n / m)
        assert abs(st.mean[i] - n * LYAP) < 4.0 * se
        # chi-square 99.9% band around the true iid variance n * STEP_VAR
        lo = n * STEP_VAR * (1 - 4.7 * math.sqrt(2.0 / m))
        hi = n * STEP_VAR * (1 + 4.7 * math.sqrt(2.0 / m))
        assert lo < st.var[i] < hi


# ----------------------------------------------------- trajectory identity


def test_increments_telescope_to_product_and_simulate():
    grid = [3, 7, 16]
    st = simulate(IID, None, grid, m=32, seed=17)
    x0 = IID.x0.rep
    for traj in (0, 5, 31):
        xs = increments(IID, None, 16, 17, traj=traj)
        assert xs.shape == (16,)
        prefix = np.cumsum(xs)
        for i, n in enumerate(grid):
            assert prefix[n - 1] == pytest.approx(st.samples[i, traj], abs=1e-12)
            P = product_range(IID, 1, n, 17, traj=traj)
            direct = math.log(np.linalg.norm(P.entries @ x0))
            assert prefix[n - 1] == pytest.approx(direct, abs=1e-9)


def test_increments_bounded_by_log_norm():
    xs = increments(IID, None, 64, 23, traj=4)
    # every step is one rotation-scaled SL(2) matrix with ||g|| = a
    assert np.max(np.abs(xs)) <= math.log(A_ROT) + 1e-12


def test_markov_increments_match_simulate():
    spec = EnsembleSpec(family="markov_chain", dim=2, params={
        "kernel": {"kind": "two_state", "a_big": 4.0,
                   "fixed": [[2.0, 0.0], [0.0, 0.5]],
                   "switch_prob": 0.75, "norm_threshold": 3.0}})
    st = simulate(spec, None, [32], m=8, seed=29)
    for traj in range(8):
        xs = increments(spec, None, 32, 29, traj=traj)
        assert xs.sum() == pytest.approx(st.samples[0, traj], abs=1e-12)


# ------------------------------------------------------------ determinism


def test_worker_counts_bit_identical():
    grid = [4, 16, 64]
    a = simulate(IID, None, grid, m=1003, seed=41, workers=1)
    b = simulate(IID, None, grid, m=1003, seed=41, workers=8)
    c = simulate(IID, None, grid, m=1003, seed=41, workers=3)
    assert np.array_equal(a.samples, b.samples)
    assert np.array_equal(a.samples, c.samples)
    assert np.array_equal(a.mean, b.mean)
    assert np.array_equal(a.var, c.var)


def test_env_worker_override(monkeypatch):
    monkeypatch.setenv("COCYCLE_LAB_WORKERS", "5")
    assert resolve_workers(None) == 5
    assert resolve_workers(2) == 2
    monkeypatch.delenv("COCYCLE_LAB_WORKERS")
    assert resolve_workers(None) == 1
    with pytest.raises(ValueError):
        resolve_workers(0)


def test_streamed_moments_match_sample_recompute():
    st = simulate(IID, None, [8, 32], m=4000, seed=53)
    assert np.allclose(st.mean, st.samples.mean(axis=1), rtol=1e-12, atol=0)
    assert np.allclose(st.var, st.samples.var(axis=1, ddof=1), rtol=1e-12, atol=0)


def test_sample_cap_preserves_moments_and_ids():
    full = simulate(IID, None, [8], m=300, seed=61)
    capped = simulate(IID, None, [8], m=300, seed=61, sample_cap=50)
    assert capped.capped and not full.capped
    assert capped.samples.shape == (1, 50)
    assert capped.m == 300
    # moments stream over all trajectories, unaffected by the cap
    assert np.array_equal(capped.mean, full.mean)
    assert np.array_equal(capped.var, full.var)
    ids = capped.traj_ids
    assert len(set(ids.tolist())) == 50
    assert np.all(np.diff(ids) > 0)
    # stored columns are the matching slices of the full run
    assert np.array_equal(capped.samples, full.samples[:, ids])
    again = simulate(IID, None, [8], m=300, seed=61, sample_cap=50)
    assert np.array_equal(again.traj_ids, ids)


# ------------------------------------------------------------- validation


def test_simulate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        simulate(IID, None, [4, 4, 8], m=10, seed=1)
    with pytest.raises(ValueError):
        simulate(IID, None, [8, 4], m=10, seed=1)
    with pytest.raises(ValueError):
        simulate(IID, None, [0, 4], m=10, seed=1)
    with pytest.raises(ValueError):
        simulate(IID, None, [], m=10, seed=1)
    with pytest.raises(ValueError):
        simulate(IID, None, [4], m=1, seed=1)
    with pytest.raises(ValueError):
        simulate(IID, [1.0, 0.0, 0.0], [4], m=10, seed=1)


def test_tail_and_approx_argument_validation():
    pair = (Direction([1.0, 0.0]), Direction([0.0, 1.0]))
    with pytest.raises(ValueError):
        contraction_tail(IID, 1, [pair], ell=0.0, k_grid=[2, 4], mc=10, seed=1)
    with pytest.raises(ValueError):
        contraction_tail(IID, 1, [pair], ell=0.1, k_grid=[4, 2], mc=10, seed=1)
    same = Direction([1.0, 0.0])
    with pytest.raises(ValueError):
        contraction_tail(IID, 1, [(same, same)], ell=0.1, k_grid=[2, 4], mc=10, seed=1)
    with pytest.raises(ValueError):
        approx_coefficients(IID, k=8, r_grid=[4, 2], mc=10, seed=1)
    markov = EnsembleSpec(family="markov_chain", dim=2,
                          params={"kernel": {"kind": "identity"}})
    with pytest.raises(ValueError):
        approx_coefficients(markov, k=8, r_grid=[0, 2], mc=10, seed=1)


# ---------------------------------------------------------- tail estimate


def test_tail_geometric_decay_for_contracting_family():
    pairs = [(Direction([1.0, 0.0]), Direction([0.0, 1.0])),
             (Direction([1.0, 0.0]), Direction.from_vector([1.0, 0.05]))]
    tc = contraction_tail(IID, j=1, pairs=pairs, ell=0.1,
                          k_grid=[4, 8, 12, 16, 20], mc=4000, seed=71)
    assert tc.per_pair.shape == (2, 5)
    assert np.all(tc.probs <= 1.0) and np.all(tc.probs >= 0.0)
    assert np.all(tc.probs == tc.per_pair.max(axis=0))
    assert tc.gamma < 0.95
    assert tc.r2 > 0.9
    assert tc.gamma_ci[0] <= tc.gamma <= tc.gamma_ci[1]
    assert tc.fitted_points == 5


def test_tail_isometry_saturates_at_one():
    # fixed rotation: projective distances never move, so the event
    # { d_k >= e^{-ell k} } holds surely for a distance-1 pair
    spec = EnsembleSpec(family="contracting_norm", dim=2,
                        params={"matrix_cycle": [rotation(0.3)]})
    tc = contraction_tail(spec, j=1,
                          pairs=[(Direction([1.0, 0.0]), Direction([0.0, 1.0]))],
                          ell=0.1, k_grid=[2, 4, 8], mc=64, seed=73)
    assert np.all(tc.probs == 1.0)
    assert tc.gamma == 1.0
    assert tc.r2 == 0.0


def test_tail_censors_empty_cells():
    tc = contraction_tail(IID, j=1,
                          pairs=[(Direction([1.0, 0.0]), Direction([0.0, 1.0]))],
                          ell=0.1, k_grid=[4, 8, 16, 32, 64, 96], mc=300, seed=79)
    assert np.any(tc.censored)
    assert tc.fitted_points == int((~tc.censored).sum())
    assert tc.fitted_points >= 2
    assert np.all(tc.counts[tc.censored] == 0)
    assert tc.gamma < 1.0


def test_tail_independent_of_block_start_distribution():
    # iid family: the estimator at j=1 and j=1000 sees the same law
    pair = [(Direction([1.0, 0.0]), Direction([0.0, 1.0]))]
    t1 = contraction_tail(IID, 1, pair, 0.1, [4, 8, 12], mc=3000, seed=83)
    t2 = contraction_tail(IID, 1000, pair, 0.1, [4, 8, 12], mc=3000, seed=83)
    assert np.allclose(t1.probs, t2.probs, atol=0.03)


# ------------------------------------------------ approximation estimate


def test_approx_decay_for_contracting_family():
    ac = approx_coefficients(IID, k=16, r_grid=[0, 2, 4, 6, 8, 10], mc=2000, seed=89)
    assert ac.coefs.shape == (6,)
    assert np.all(ac.coefs > 0)
    # deeper history blocks bring the two start directions together
    assert ac.coefs[-1] < ac.coefs[0]
    assert ac.rho < 1.0
    assert ac.r2 > 0.9
    assert ac.rho_ci[0] <= ac.rho <= ac.rho_ci[1]


def test_approx_boundary_fills_indices_below_one():
    from cocycle_lab import SquareMatrix

    base = approx_coefficients(IID, k=4, r_grid=[3, 4], mc=600, seed=97)
    # the default boundary is the identity, so depth k collapses to k-1
    assert base.coefs[1] == base.coefs[0]
    forced = approx_coefficients(IID, k=4, r_grid=[3, 4], mc=600, seed=97,
                                 boundary=SquareMatrix([[50.0, 0.0], [0.0, 0.02]]))
    assert forced.coefs[0] == base.coefs[0]  # r = 3 never touches index 0
    assert forced.coefs[1] != base.coefs[1]  # r = 4 applies the boundary once


def test_approx_shares_the_final_step_across_depths():
    # with r = 0 the pairs are untouched, so the coefficient is the raw
    # one-step cocycle gap at the worst pair; it must be positive and
    # bounded by 2 ln a
    ac = approx_coefficients(IID, k=9, r_grid=[0], mc=500, seed=101)
    assert 0.0 < ac.coefs[0] <= 2.0 * math.log(A_ROT) + 1e-12


# --------------------------------------------------------------- variance


def test_variance_profile_divergent_for_iid():
    st = simulate(IID, None, [8, 16, 32, 64, 128, 256], m=8000, seed=103)
    vp = variance_profile(st)
    assert vp.classification == "Divergent"
    assert vp.linear_growth_min > 0.5 * STEP_VAR
    assert np.all(vp.ci_low <= st.var) and np.all(st.var <= vp.ci_high)


def test_variance_profile_bounded_for_isometry():
    spec = EnsembleSpec(family="contracting_norm", dim=2,
                        params={"matrix_cycle": [rotation(0.9)]})
    st = simulate(spec, None, [4, 8, 16, 32], m=200, seed=107)
    vp = variance_profile(st)
    assert vp.classification == "Bounded"


def test_variance_profile_undecided_on_crossing_pattern():
    fake = TrajectoryStats(
        n_grid=(1, 2, 3, 4), samples=np.zeros((4, 1)),
        mean=np.zeros(4), var=np.array([1.0, 2.0, 1.0, 1.9]),
        m=100000, master_seed=0, spec_digest="x", x0=(1.0, 0.0),
        traj_ids=np.arange(1), capped=False)
    vp = variance_profile(fake)
    assert vp.classification == "Undecided"


# -------------------------------------------------------------- fit + csv


def test_log_linear_fit_recovers_exact_line():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = 3.0 - 0.5 * x
    slope, intercept, se, r2 = log_linear_fit(x, y)
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert intercept == pytest.approx(3.0, abs=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        log_linear_fit(np.array([1.0]), np.array([2.0]))
    with pytest.raises(ValueError):
        log_linear_fit(np.array([2.0, 2.0]), np.array([1.0, 3.0]))


def test_csv_round_trip(tmp_path):
    st = simulate(IID, None, [2, 5], m=20, seed=109)
    stats_path = tmp_path / "stats.csv"
    samples_path = tmp_path / "samples.csv"
    write_stats_csv(st, str(stats_path))
    write_samples_csv(st, str(samples_path))

    lines = stats_path.read_text().strip().split("\n")
    assert lines[0] == "n,mean,var,m"
    assert len(lines) == 3
    for i, row in enumerate(lines[1:]):
        n, mean, var, m = row.split(",")
        assert int(n) == st.n_grid[i]
        assert float(mean) == st.mean[i]  # 17 digits round-trips exactly
        assert float(var) == st.var[i]
        assert int(m) == 20

    rows = samples_path.read_text().strip().split("\n")
    assert rows[0] == "n,traj,value"
    assert len(rows) == 1 + 2 * 20
    n0, t0, v0 = rows[1].split(",")
    assert (int(n0), int(t0)) == (2, 0)
    assert float(v0) == st.samples[0, 0]


def test_samples_csv_cap_is_deterministic(tmp_path):
    st = simulate(IID, None, [3], m=40, seed=113)
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    write_samples_csv(st, str(p1), cap=7)
    write_samples_csv(st, str(p2), cap=7)
    assert p1.read_text() == p2.read_text()
    body = p1.read_text().strip().split("\n")[1:]
    assert len(body) == 7
    trajs = [int(r.split(",")[1]) for r in body]
    assert len(set(trajs)) == 7
    assert all(0 <= t < 40 for t in trajs)
