import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from synthcace.errors import DimensionMismatch
from synthcace.estimators import CandidateEstimates, default_registry, estimate_all
from synthcace.resample import SamplingMoments, bootstrap_sigma, split
from synthcace.synthesis import (
    DerivedMatrices,
    bias_raw,
    bias_shrunk,
    combine,
    derive_matrices,
    mse_objective,
    mse_objective_expanded,
    shrink_weights,
    solve_weights,
    split_combination,
    synthesize,
    synthesize_split,
)

from conftest import make_data


def moments(v0, c, v):
    c = np.atleast_1d(np.asarray(c, float))
    v = np.atleast_2d(np.asarray(v, float))
    sigma = np.block([[np.array([[v0]]), c[None]], [c[:, None], v]])
    return SamplingMoments.from_sigma(sigma, [f"c{j}" for j in range(len(c))])


def grid(k, step):
    ticks = np.arange(0, 1 + step / 2, step)
    pts = np.array(list(itertools.product(ticks, repeat=k)))
    return pts[pts.sum(axis=1) <= 1 + 1e-12]


def grid_min(dm, v0, step=0.02):
    pts = grid(dm.k, step)
    M = dm.t_mat + dm.d_mat
    return (v0 - 2 * pts @ dm.p_vec + np.einsum("ij,jk,ik->i", pts, M, pts)).min()


def random_moments(rng, k):
    A = rng.standard_normal((k + 1, k + 3))
    return SamplingMoments.from_sigma(A @ A.T / (k + 3), [f"c{j}" for j in range(k)])


def test_derived_hand():
    dm = derive_matrices(moments(2.0, 0.0, 1.0), [0.0])
    assert dm.p_vec.tolist() == [2.0] and dm.t_mat.tolist() == [[3.0]]


def test_perfectly_correlated_candidates():
    m = moments(2.0, [2.0, 2.0], np.full((2, 2), 2.0))
    dm = derive_matrices(m, [0, 0])
    assert np.all(dm.p_vec == 0) and np.all(dm.t_mat == 0)


def test_outer_product():
    dm = derive_matrices(moments(1.0, [0, 0], np.eye(2)), [1.0, 0.0])
    assert dm.d_mat.tolist() == [[1, 0], [0, 0]]


def test_bias_length_checked():
    with pytest.raises(DimensionMismatch):
        derive_matrices(moments(1.0, [0, 0], np.eye(2)), [1.0])


def test_objective_hand():
    m = moments(2.0, 0.0, 1.0)
    dm = derive_matrices(m, [0.0])
    assert mse_objective([0.0], dm, 2.0) == 2.0
    assert mse_objective([2 / 3], dm, 2.0) == pytest.approx(2 / 3)


@pytest.mark.parametrize("d, b", [(0.0, 2 / 3), (1.0, 0.5)])
def test_solver_interior_k1(d, b):
    sol = solve_weights(derive_matrices(moments(2.0, 0.0, 1.0), [d]), 2.0)
    assert sol.b1[0] == pytest.approx(b, abs=1e-12)
    assert not sol.on_boundary


def test_solver_sum_constraint_k2():
    dm = DerivedMatrices(np.array([3.0, 3.0]), np.array([[3.0, 1], [1, 3]]), np.zeros(2), np.zeros((2, 2)))
    assert np.all(np.linalg.solve(dm.t_mat, dm.p_vec) == 0.75)
    sol = solve_weights(dm, 5.0)
    np.testing.assert_allclose(sol.b1, [0.5, 0.5], atol=1e-12)
    assert sol.on_boundary and 2 in sol.active_constraints
    pts = grid(2, 1e-3)
    vals = 5 - 2 * pts @ dm.p_vec + np.einsum("ij,jk,ik->i", pts, dm.t_mat, pts)
    np.testing.assert_allclose(pts[vals.argmin()], [0.5, 0.5], atol=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_solver_beats_grid(seed, k):
    rng = np.random.default_rng(seed)
    m = random_moments(rng, k)
    d = rng.standard_normal(k) * rng.choice([0.0, 0.3, 3.0])
    dm = derive_matrices(m, d)
    sol = solve_weights(dm, m.v0)
    assert np.all(sol.b1 >= 0) and np.all(sol.b1 <= 1) and sol.b1.sum() <= 1 + 1e-12
    assert sol.b0 == pytest.approx(1 - sol.b1.sum())
    assert sol.objective <= grid_min(dm, m.v0) + 1e-9
    assert sol.objective <= m.v0 + 1e-15
    assert sol.objective == pytest.approx(mse_objective(sol.b1, dm, m.v0), abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_two_objective_forms_agree(seed, k):
    rng = np.random.default_rng(seed)
    m = random_moments(rng, k)
    d = rng.standard_normal(k)
    b = rng.dirichlet(np.ones(k + 1))[:k]
    assert mse_objective(b, derive_matrices(m, d), m.v0) == pytest.approx(mse_objective_expanded(b, m, d), abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(1, 20))
def test_larger_bias_never_adds_weight(seed, c):
    rng = np.random.default_rng(seed)
    m = random_moments(rng, 1)
    d = rng.standard_normal(1)
    b_small = solve_weights(derive_matrices(m, d), m.v0).b1.sum()
    b_large = solve_weights(derive_matrices(m, c * d), m.v0).b1.sum()
    assert b_large <= b_small + 1e-12


def test_singular_t_gets_ridge():
    m = moments(2.0, [2.0, 2.0], np.full((2, 2), 2.0))
    sol = solve_weights(derive_matrices(m, [0, 0]), m.v0)
    assert sol.ridge > 0 and np.all(np.isfinite(sol.b1))


def test_larger_k_against_random_feasible_points():
    rng = np.random.default_rng(5)
    for _ in range(20):
        k = 8
        m = random_moments(rng, k)
        dm = derive_matrices(m, rng.standard_normal(k) * 0.3)
        sol = solve_weights(dm, m.v0)
        pts = rng.dirichlet(np.ones(k + 1), 2000)[:, :k]
        vals = m.v0 - 2 * pts @ dm.p_vec + np.einsum("ij,jk,ik->i", pts, dm.t_mat + dm.d_mat, pts)
        assert sol.objective <= vals.min() + 1e-12


def est(theta0, theta1):
    theta1 = np.asarray(theta1, float)
    return CandidateEstimates(theta0, theta1, tuple(f"c{j}" for j in range(len(theta1))))


@pytest.mark.parametrize(
    "theta0, theta1, d", [(1, [1, 1], [0, 0]), (1, [2, 0.5], [1, -0.5]), (3, [3], [0])]
)
def test_bias_raw(theta0, theta1, d):
    assert bias_raw(est(theta0, theta1)).tolist() == d


def test_shrinkage_hand():
    m = moments(2.0, 0.0, 1.0)
    assert shrink_weights([1.0], m)[0] == pytest.approx(0.25)
    assert bias_shrunk(est(0.0, [1.0]), m)[0] == pytest.approx(0.25)
    assert shrink_weights([0.0], m)[0] == 0
    assert shrink_weights([1e4], m)[0] == pytest.approx(1, abs=1e-7)


@given(st.integers(0, 2**32 - 1))
def test_shrinkage_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    m = random_moments(rng, 3)
    w = shrink_weights(rng.standard_normal(3) * 5, m)
    assert np.all((w >= 0) & (w < 1))


def test_synthesize_hand():
    sr = synthesize(est(0.0, [3.0]), moments(2.0, 0.0, 1.0), "raw")
    assert sr.weights.b1[0] == pytest.approx(1 / 6)
    assert sr.estimate == pytest.approx(0.5)


def test_identical_candidates_give_reference():
    sr = synthesize(est(1.3, [1.3, 1.3]), moments(1.0, [0.2, 0.1], [[1, 0.3], [0.3, 2]]), "raw")
    assert sr.estimate == pytest.approx(1.3, abs=1e-15)


def test_huge_bias_falls_back_to_reference():
    sr = synthesize(est(1.0, [1e6]), moments(2.0, 0.0, 1.0), "raw")
    assert sr.weights.b1[0] < 1e-10
    assert sr.estimate == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("variant", ["raw", "shrunk"])
def test_estimate_is_the_combination(data, variant):
    e = estimate_all(data, default_registry())
    m = bootstrap_sigma(data, default_registry(), B=40, seed=0, ids=e.ids)
    sr = synthesize(e, m, variant)
    assert sr.estimate == combine(e.theta0, e.theta1, sr.weights.b1)
    assert sr.estimate == pytest.approx(sr.weights.b0 * e.theta0 + sr.weights.b1 @ e.theta1, abs=1e-14)


def test_split_symmetric_halves():
    m = moments(1.0, [0.2, 0.1], [[1, 0.3], [0.3, 2]])
    e = est(0.4, [0.9, 0.1])
    sr = split_combination(e, e, m)
    assert sr.estimate == pytest.approx(synthesize(e, m).estimate, abs=1e-14)


def test_split_zero_weights():
    m = moments(1.0, [0.0], [[1.0]])
    sr = split_combination(est(0.2, [1e6]), est(0.6, [-1e6]), m)
    assert sr.estimate == pytest.approx(0.4, abs=1e-6)


def test_split_three_candidate_hand():
    m = moments(1.0, [0.5, 0.2, 0.0], [[1.0, 0.1, 0.0], [0.1, 1.5, 0.2], [0.0, 0.2, 2.0]])
    a, b = est(1.0, [1.2, 0.7, 1.5]), est(0.8, [0.9, 1.1, 0.6])
    sr = split_combination(a, b, m)
    # independent scalar composition
    w_from_b = solve_weights(derive_matrices(m, np.array([0.9, 1.1, 0.6]) - 0.8), 1.0).b1
    w_from_a = solve_weights(derive_matrices(m, np.array([1.2, 0.7, 1.5]) - 1.0), 1.0).b1
    va = (1 - w_from_b.sum()) * 1.0 + w_from_b[0] * 1.2 + w_from_b[1] * 0.7 + w_from_b[2] * 1.5
    vb = (1 - w_from_a.sum()) * 0.8 + w_from_a[0] * 0.9 + w_from_a[1] * 1.1 + w_from_a[2] * 0.6
    assert sr.estimate == pytest.approx((va + vb) / 2, abs=1e-14)


def test_synthesize_split_runs(data):
    reg = default_registry()
    m = bootstrap_sigma(data, reg, B=30, seed=0)
    sr = synthesize_split(data, reg, m, seed=3)
    pair = split(data, 3)
    ref = split_combination(estimate_all(pair.half_a, reg), estimate_all(pair.half_b, reg), m)
    assert sr.variant == "split" and sr.estimate == ref.estimate
