import numpy as np
import pytest

from condense import condense_mpc
from qpcore import DEGENERATE, INFEASIBLE, OPTIMAL, UNBOUNDED, chebyshev_center, solve_lp, solve_qp


@pytest.fixture
def example1_mpc(example1_model, example1_weights, example1_constraints):
    return condense_mpc(example1_model, example1_weights, example1_constraints, 2)


def assert_kkt(H, f, G, d, sol, tol=1e-7):
    z, lam = sol.z_star, sol.lambda_star
    assert np.all(G @ z <= d + tol)
    assert np.all(lam >= -tol)
    np.testing.assert_allclose(H @ z + f + G.T @ lam, 0.0, atol=tol)
    np.testing.assert_allclose(lam * (G @ z - d), 0.0, atol=tol)


def test_origin_is_unconstrained_optimum(example1_mpc):
    sol = solve_qp(example1_mpc.H, example1_mpc.linear_term([0.0]), example1_mpc.G, example1_mpc.bound([0.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z_star, [0.0, 0.0], atol=1e-12)
    np.testing.assert_array_equal(sol.lambda_star, np.zeros(8))
    assert sol.active_set == ()


def test_input_bounds_become_active(example1_mpc):
    """At x0 = 3 the unconstrained optimum (-1.92, -0.84) violates u(0) >= -1."""
    x0 = [3.0]
    sol = solve_qp(example1_mpc.H, example1_mpc.linear_term(x0), example1_mpc.G, example1_mpc.bound(x0))
    assert sol.optimal
    np.testing.assert_allclose(sol.z_star, [-1.0, -1.0], atol=1e-9)
    assert 1 in sol.active_set and 3 in sol.active_set
    np.testing.assert_allclose(sol.lambda_star[[1, 3]], [2.6, 0.6], atol=1e-9)
    assert_kkt(example1_mpc.H, example1_mpc.linear_term(x0), example1_mpc.G, example1_mpc.bound(x0), sol)


def test_infeasible_constraints():
    sol = solve_qp(np.eye(1), [0.0], [[1.0], [-1.0]], [-1.0, -1.0])
    assert sol.status == INFEASIBLE


def test_indefinite_hessian_is_rejected():
    with pytest.raises(ValueError, match="positive definite"):
        solve_qp([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])
    with pytest.raises(ValueError, match="symmetric"):
        solve_qp([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0])


def test_unconstrained_solve():
    sol = solve_qp([[2.0, 0.0], [0.0, 4.0]], [-2.0, 4.0])
    np.testing.assert_allclose(sol.z_star, [1.0, -1.0])
    assert sol.iterations == 0


def test_random_qps_satisfy_kkt():
    rng = np.random.default_rng(42)
    for _ in range(50):
        n, q = rng.integers(2, 6), rng.integers(1, 12)
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.1 * np.eye(n)
        f = rng.normal(size=n) * 3
        G = rng.normal(size=(q, n))
        d = rng.uniform(0.1, 1.0, size=q)  # z = 0 strictly feasible
        sol = solve_qp(H, f, G, d)
        assert sol.status == OPTIMAL
        assert_kkt(H, f, G, d, sol)


def test_solver_is_deterministic():
    rng = np.random.default_rng(5)
    H = np.eye(3)
    f = rng.normal(size=3) * 5
    G = np.vstack([np.eye(3), -np.eye(3), np.ones((1, 3))])
    d = np.ones(7)
    first, second = solve_qp(H, f, G, d), solve_qp(H, f, G, d)
    assert first.active_set == second.active_set
    np.testing.assert_array_equal(first.z_star, second.z_star)


def test_iteration_cap_reports_degenerate():
    sol = solve_qp(np.eye(2), [10.0, 10.0], -np.eye(2), [1.0, 1.0], max_iter=0)
    assert sol.status == DEGENERATE


def test_lp_statuses():
    res = solve_lp([1.0], [[-1.0]], [-2.0])
    assert res.status == OPTIMAL and res.value == pytest.approx(2.0)
    assert solve_lp([1.0]).status == UNBOUNDED
    assert solve_lp([0.0], [[1.0], [-1.0]], [-1.0, -1.0]).status == INFEASIBLE


def test_chebyshev_center_of_box():
    A = np.vstack([np.eye(2), -np.eye(2)])
    center, radius, status = chebyshev_center(A, np.array([1.0, 1.0, 1.0, 1.0]))
    assert status == OPTIMAL
    np.testing.assert_allclose(center, [0.0, 0.0], atol=1e-9)
    assert radius == pytest.approx(1.0)


def test_chebyshev_center_of_slab_has_zero_radius():
    center, radius, status = chebyshev_center([[1.0], [-1.0]], [0.0, 0.0])
    assert status == OPTIMAL and radius == pytest.approx(0.0, abs=1e-12)


def projected_gradient(H, f, lower, upper, iterations=20000):
    step = 1.0 / np.linalg.eigvalsh(H).max()
    z = np.clip(np.zeros_like(f), lower, upper)
    for _ in range(iterations):
        z = np.clip(z - step * (H @ z + f), lower, upper)
    return z


def test_box_qps_match_projected_gradient():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = rng.integers(2, 5)
        M = rng.normal(size=(n, n))
        H = M @ M.T + np.eye(n)
        f = rng.normal(size=n) * 4
        lower, upper = -rng.uniform(0.2, 1.0, size=n), rng.uniform(0.2, 1.0, size=n)
        sol = solve_qp(H, f, np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))
        assert sol.optimal
        np.testing.assert_allclose(sol.z_star, projected_gradient(H, f, lower, upper), atol=1e-6)


def test_primal_objective_equals_dual_value():
    rng = np.random.default_rng(21)
    for _ in range(30):
        n, q = rng.integers(2, 6), rng.integers(1, 10)
        M = rng.normal(size=(n, n))
        H = M @ M.T + 0.1 * np.eye(n)
        f = rng.normal(size=n) * 3
        G = rng.normal(size=(q, n))
        d = rng.uniform(0.1, 1.0, size=q)
        sol = solve_qp(H, f, G, d)
        z, lam = sol.z_star, sol.lambda_star
        primal = 0.5 * z @ H @ z + f @ z
        g = f + G.T @ lam
        dual = -0.5 * g @ np.linalg.solve(H, g) - lam @ d
        assert primal == pytest.approx(dual, abs=1e-8 * (1.0 + abs(primal)))
