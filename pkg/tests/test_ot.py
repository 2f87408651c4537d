import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sinkflow import _kernels_py, kernels
from sinkflow.errors import ApproximateResultWarning, CapabilityError, NumericError, SchemaError, ValidationError
from sinkflow.ot import (
    CostMatrix,
    SampleBatch,
    SinkhornConfig,
    cost_matrix,
    divergence_and_gradient,
    divergence_gradient,
    entropic_ot,
    exact_ot_oracle,
    ot_cost,
    plan_entropy,
    sinkhorn_divergence,
    sinkhorn_plan,
)
from sinkflow.validate import TIGHT



def U(points):
    return SampleBatch.uniform(np.asarray(points, dtype=np.float64))


def batch_pairs(max_n=5, max_d=3):
    @st.composite
    def build(draw):
        d = draw(st.integers(1, max_d))
        n = draw(st.integers(1, max_n))
        m = draw(st.integers(1, max_n))
        elems = st.floats(-3, 3, allow_nan=False, width=64)
        x = draw(arrays(np.float64, (n, d), elements=elems))
        y = draw(arrays(np.float64, (m, d), elements=elems))
        return U(x), U(y)
    return build()


# -- types ---------------------------------------------------------------

def test_sample_batch_validation():
    with pytest.raises(ValidationError):
        SampleBatch(np.zeros((2, 1)), np.array([0.3, 0.3]))
    with pytest.raises(ValidationError):
        SampleBatch(np.zeros((2, 1)), np.array([1.5, -0.5]))
    with pytest.raises(NumericError):
        SampleBatch.uniform(np.array([[np.nan]]))
    with pytest.raises(SchemaError):
        SampleBatch.uniform(np.zeros((0, 2)))


def test_sinkhorn_config_rejects_bad_values():
    for bad in (0.0, -1.0, np.inf):
        with pytest.raises(ValidationError):
            SinkhornConfig(epsilon=bad)
    with pytest.raises(ValidationError):
        SinkhornConfig(max_iterations=0)
    with pytest.raises(ValidationError):
        SinkhornConfig(marginal_tolerance=0)


# -- cost matrix -----------------------------------------------------------

def test_cost_matrix_examples():
    assert cost_matrix(U([[0, 0]]), U([[0, 0]])).entries.tolist() == [[0.0]]
    assert cost_matrix(U([[0, 0]]), U([[3, 4]])).entries.tolist() == [[25.0]]
    assert cost_matrix(U([[1, 1], [2, 2]]), U([[1, 1]])).entries.tolist() == [[0.0], [2.0]]


def test_cost_matrix_dimension_mismatch():
    with pytest.raises(SchemaError):
        cost_matrix(U([[0, 0]]), U([[0, 0, 0]]))


@given(batch_pairs())
def test_cost_matrix_nonnegative_and_zero_on_equal_points(pair):
    a, b = pair
    C = cost_matrix(a, b).entries
    assert np.all(C >= 0)
    assert np.all(np.diag(cost_matrix(a, a).entries) == 0)
    brute = ((a.points[:, None, :] - b.points[None, :, :]) ** 2).sum(-1)
    np.testing.assert_allclose(C, brute, rtol=1e-12, atol=1e-12)


# -- plans ---------------------------------------------------------------

@pytest.mark.parametrize("eps", [1e-3, 0.05, 10.0])
def test_singleton_plan_is_forced(eps):
    a = U([[0.5, -1.0]])
    plan = sinkhorn_plan(a, a, SinkhornConfig(epsilon=eps))
    assert plan.coupling.tolist() == [[1.0]]
    assert np.all(np.isfinite(plan.dual_u)) and np.all(np.isfinite(plan.dual_v))
    assert plan.converged and plan.iterations_used <= 2


def test_two_point_plan_approaches_cheaper_assignment():
    a = U([[0.0], [1.0]])
    b = U([[0.1], [1.2]])
    C = cost_matrix(a, b).entries
    # identity assignment is cheaper than the swap
    assert C[0, 0] + C[1, 1] < C[0, 1] + C[1, 0]
    cfg = SinkhornConfig(epsilon=1e-3 * C.mean(), max_iterations=5000)
    plan = sinkhorn_plan(a, b, cfg)
    np.testing.assert_allclose(plan.coupling, np.eye(2) / 2, atol=1e-6)


def test_zero_mass_row_is_empty():
    a = SampleBatch(np.array([[0.0], [5.0]]), np.array([1.0, 0.0]))
    b = U([[1.0], [2.0]])
    plan = sinkhorn_plan(a, b, SinkhornConfig(epsilon=0.1))
    assert np.all(np.abs(plan.coupling[1]) <= 1e-9)
    np.testing.assert_allclose(plan.coupling.sum(axis=0), b.weights, atol=1e-6)


def test_plan_rejects_nonfinite_cost():
    a, b = U([[0.0], [1.0]]), U([[0.0]])
    with pytest.raises(NumericError):
        sinkhorn_plan(a, b, SinkhornConfig(), CostMatrix(np.array([[0.0], [np.inf]])))


def test_plan_reconstructs_from_duals(rng):
    a, b = U(rng.normal(size=(4, 2))), U(rng.normal(size=(3, 2)))
    cfg = SinkhornConfig(epsilon=0.3)
    plan = sinkhorn_plan(a, b, cfg)
    C = cost_matrix(a, b).entries
    rebuilt = a.weights[:, None] * b.weights[None, :] * np.exp(
        (plan.dual_u[:, None] + plan.dual_v[None, :] - C) / cfg.epsilon)
    np.testing.assert_allclose(plan.coupling, rebuilt, rtol=1e-12)


def test_nonconvergence_is_reported_not_raised(rng):
    a, b = U(rng.normal(size=(5, 2))), U(rng.normal(size=(5, 2)) + 3)
    plan = sinkhorn_plan(a, b, SinkhornConfig(epsilon=1e-3, max_iterations=3))
    assert not plan.converged
    assert plan.iterations_used == 3


@given(batch_pairs())
def test_converged_plans_are_feasible(pair):
    a, b = pair
    cfg = SinkhornConfig(epsilon=0.5, max_iterations=5000, marginal_tolerance=1e-8)
    plan = sinkhorn_plan(a, b, cfg)
    assert np.all(plan.coupling >= 0)
    if plan.converged:
        err = (np.abs(plan.coupling.sum(1) - a.weights).sum()
               + np.abs(plan.coupling.sum(0) - b.weights).sum())
        assert err <= cfg.marginal_tolerance * 1.0001


# -- ot_cost ---------------------------------------------------------------

def test_ot_cost_examples():
    a = U([[1.0, 2.0]])
    cfg = SinkhornConfig()
    assert ot_cost(sinkhorn_plan(a, a, cfg), cost_matrix(a, a)) == 0.0
    b = U([[4.0, 6.0]])
    assert ot_cost(sinkhorn_plan(a, b, cfg), cost_matrix(a, b)) == 25.0


def test_ot_cost_uniform_limit():
    a, b = U([[0.0], [1.0]]), U([[0.0], [1.0]])
    C = CostMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    plan = sinkhorn_plan(a, b, SinkhornConfig(epsilon=1e6), C)
    assert ot_cost(plan, C) == pytest.approx(1.5, abs=1e-6)


def test_ot_cost_shape_mismatch():
    a, b = U([[0.0], [1.0]]), U([[0.0]])
    plan = sinkhorn_plan(a, b, SinkhornConfig())
    with pytest.raises(SchemaError):
        ot_cost(plan, CostMatrix(np.zeros((2, 2))))


def test_entropic_value_matches_primal(rng):
    a, b = U(rng.normal(size=(4, 2))), U(rng.normal(size=(5, 2)))
    value, plan = entropic_ot(a, b, TIGHT)
    C = cost_matrix(a, b).entries
    P = plan.coupling
    kl = np.sum(P * np.log(P / np.outer(a.weights, b.weights)))
    assert value == pytest.approx(np.sum(P * C) + TIGHT.epsilon * kl, rel=1e-9)
    assert plan_entropy(plan) == pytest.approx(-np.sum(P * np.log(P)), rel=1e-12)


# -- divergence --------------------------------------------------------------

def test_divergence_self_zero_and_singletons():
    a = U([[0.2, 0.4], [1.0, -1.0], [3.0, 0.0]])
    assert abs(sinkhorn_divergence(a, a, SinkhornConfig())) <= 1e-6
    x, y = U([[1.0, 2.0]]), U([[4.0, -2.0]])
    assert sinkhorn_divergence(x, y, SinkhornConfig()) == 25.0
    np.testing.assert_array_equal(divergence_gradient(x, y, SinkhornConfig()), [[6.0, -8.0]])


def test_divergence_matches_oracle_at_small_epsilon(rng):
    worst = 0.0
    for _ in range(20):
        a, b = U(rng.normal(size=(3, 2))), U(rng.normal(size=(3, 2)))
        eps = 0.01 * cost_matrix(a, b).entries.mean()
        cfg = SinkhornConfig(epsilon=eps, max_iterations=20000, marginal_tolerance=1e-9)
        exact = exact_ot_oracle(a, b)
        worst = max(worst, abs(sinkhorn_divergence(a, b, cfg) - exact) / exact)
    assert worst <= 0.05


def test_gradient_zero_at_identical_batches(rng):
    a = U(rng.normal(size=(4, 3)))
    assert np.max(np.abs(divergence_gradient(a, a, TIGHT))) <= 1e-6


def _fd_gradient(a, b, cfg, h):
    fd = np.zeros_like(b.points)
    for idx in np.ndindex(*b.points.shape):
        y = b.points.copy()
        y[idx] += h
        up = sinkhorn_divergence(a, U(y), cfg)
        y[idx] -= 2 * h
        fd[idx] = (up - sinkhorn_divergence(a, U(y), cfg)) / (2 * h)
    return fd


@pytest.mark.filterwarnings("ignore::sinkflow.errors.ApproximateResultWarning")
def test_gradient_matches_finite_differences(rng):
    for _ in range(5):
        a, b = U(rng.normal(size=(4, 3))), U(rng.normal(size=(4, 3)))
        g = divergence_gradient(a, b, TIGHT)
        fd = _fd_gradient(a, b, TIGHT, 1e-4)
        big = np.abs(fd) >= 1e-8
        assert np.all(np.abs(g[big] - fd[big]) / np.abs(fd[big]) <= 1e-3)
        assert np.all(np.abs(g[~big] - fd[~big]) <= 1e-8)


def test_gradient_warns_when_not_converged(rng):
    a, b = U(rng.normal(size=(4, 2))), U(rng.normal(size=(4, 2)))
    cfg = SinkhornConfig(epsilon=1e-3, max_iterations=2)
    with pytest.warns(ApproximateResultWarning):
        divergence_gradient(a, b, cfg)
    assert not divergence_and_gradient(a, b, cfg).converged


def test_non_debiased_divergence_is_cross_term(rng):
    a, b = U(rng.normal(size=(3, 2))), U(rng.normal(size=(2, 2)))
    cfg = SinkhornConfig(epsilon=0.5, debias=False)
    assert sinkhorn_divergence(a, b, cfg) == pytest.approx(entropic_ot(a, b, cfg)[0], rel=1e-12)


@given(batch_pairs(max_n=4))
def test_divergence_symmetry_and_nonnegativity(pair):
    a, b = pair
    s_ab = sinkhorn_divergence(a, b, TIGHT)
    assert abs(s_ab - sinkhorn_divergence(b, a, TIGHT)) <= 1e-9
    assert s_ab >= -1e-6


@given(batch_pairs(max_n=4), st.floats(0.2, 5.0))
def test_scale_equivariance(pair, s):
    a, b = pair
    base = sinkhorn_divergence(a, b, TIGHT)
    scaled = sinkhorn_divergence(U(s * a.points), U(s * b.points), TIGHT.scaled(s * s))
    assert scaled == pytest.approx(s * s * base, rel=1e-6, abs=1e-9)


def test_oracle_gap_shrinks_with_epsilon(rng):
    gaps = {1.0: [], 0.1: [], 0.01: []}
    for _ in range(30):
        n, d = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        a, b = U(rng.normal(size=(n, d))), U(rng.normal(size=(n, d)))
        C = cost_matrix(a, b)
        exact = exact_ot_oracle(a, b)
        for f in gaps:
            cfg = SinkhornConfig(epsilon=f * C.entries.mean(), max_iterations=20000, marginal_tolerance=1e-9)
            gaps[f].append(abs(ot_cost(sinkhorn_plan(a, b, cfg, C), C) - exact) / exact)
    means = [np.mean(gaps[f]) for f in (1.0, 0.1, 0.01)]
    assert means[0] > means[1] > means[2]
    assert max(gaps[0.01]) <= 0.05


# -- exact oracle ---------------------------------------------------------------

def test_oracle_examples(rng):
    a = U(rng.normal(size=(4, 2)))
    assert exact_ot_oracle(a, a) == pytest.approx(0.0, abs=1e-15)
    assert exact_ot_oracle(U([[0, 0]]), U([[3, 4]])) == 25.0
    x, y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    C = ((x[:, None] - y[None]) ** 2).sum(-1)
    best = min(np.mean([C[i, p[i]] for i in range(3)]) for p in itertools.permutations(range(3)))
    assert exact_ot_oracle(U(x), U(y)) == pytest.approx(best, rel=1e-12)


def test_oracle_unequal_sizes_against_linear_program(rng):
    from scipy.optimize import linprog

    for n, m in [(2, 3), (3, 5), (4, 6), (1, 4)]:
        x, y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        C = ((x[:, None] - y[None]) ** 2).sum(-1)
        A = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
        rhs = np.r_[np.full(n, 1 / n), np.full(m, 1 / m)]
        lp = linprog(C.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
        assert exact_ot_oracle(U(x), U(y)) == pytest.approx(lp.fun, rel=1e-9, abs=1e-12)


def test_oracle_limits():
    with pytest.raises(CapabilityError):
        exact_ot_oracle(U(np.zeros((7, 1))), U(np.zeros((2, 1))))
    with pytest.raises(CapabilityError):
        exact_ot_oracle(SampleBatch(np.zeros((2, 1)), np.array([0.9, 0.1])), U(np.zeros((2, 1))))


# -- backends ---------------------------------------------------------------

def test_backend_selection_reports_something():
    assert kernels.BACKEND in kernels.available_backends()
    assert "python" in kernels.available_backends()


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")
def test_compiled_and_python_kernels_agree(rng):
    from sinkflow import _kernels

    for _ in range(10):
        x, y = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
        C1 = _kernels.sqeuclidean(x, y)
        C2 = _kernels_py.sqeuclidean(x, y)
        np.testing.assert_allclose(C1, C2, rtol=1e-13, atol=1e-13)
        loga, logb = np.log(np.full(7, 1 / 7)), np.log(np.full(5, 1 / 5))
        r1 = _kernels.sinkhorn_log(C1, loga, logb, 0.2, 500, 1e-9, 10)
        r2 = _kernels_py.sinkhorn_log(C1, loga, logb, 0.2, 500, 1e-9, 10)
        np.testing.assert_allclose(r1[0], r2[0], rtol=1e-9, atol=1e-11)
        np.testing.assert_allclose(r1[1], r2[1], rtol=1e-9, atol=1e-11)
        assert r1[2] == r2[2]


def test_pure_python_backend_is_selectable(monkeypatch):
    import importlib

    monkeypatch.setenv("SINKFLOW_PURE_PYTHON", "1")
    try:
        mod = importlib.reload(kernels)
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("SINKFLOW_PURE_PYTHON")
        importlib.reload(kernels)


def test_divergence_does_not_mutate_inputs(rng):
    x = rng.normal(size=(3, 2))
    a = U(x)
    before = a.points.copy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        divergence_and_gradient(a, U(rng.normal(size=(3, 2))), SinkhornConfig())
    np.testing.assert_array_equal(a.points, before)
