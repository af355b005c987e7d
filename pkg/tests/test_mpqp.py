import numpy as np
import pytest

from condense import ParametricQP, build_dpc_raw, build_reduction_maps, condense_mpc, reduce_to_beta
from datamat import HorizonSpec, generate_excitation, partition
from mpqp import (
    Polyhedron, bounding_box, evaluate, explicit_solve, feasible_parameter_box, has_interior, is_empty,
    nonredundant_rows, remove_redundant, sample_parameters,
)
from qpcore import OPTIMAL, solve_lp, solve_qp


@pytest.fixture
def example1_mpc(example1_model, example1_weights, example1_constraints):
    return condense_mpc(example1_model, example1_weights, example1_constraints, 2)


@pytest.fixture
def example1_beta(example1_data, example1_horizons, example1_weights, example1_constraints, example1_vp):
    part = partition(example1_data, example1_horizons)
    raw = build_dpc_raw(part, example1_weights, example1_constraints)
    return reduce_to_beta(raw, build_reduction_maps(part, Phi=2.0, V_p=example1_vp))


@pytest.fixture
def example1_mpc_solution(example1_mpc):
    return explicit_solve(example1_mpc, Polyhedron.box([-4.0], [4.0]))


def numeric_solution(qp, theta):
    rows = np.setdiff1d(np.arange(qp.n_constraints), qp.zero_rows())
    return solve_qp(qp.H, qp.linear_term(theta), qp.G[rows], qp.bound(theta)[rows])


def assert_matches_oracle(qp, sol, n=1000, seed=0, tol=1e-6):
    compared = 0
    for theta in sample_parameters(sol.domain, n, seed=seed):
        loc = evaluate(sol, theta)
        ref = numeric_solution(qp, theta)
        if not ref.optimal:
            assert not loc.found or np.all(qp.G @ loc.z <= qp.bound(theta) + 1e-6)
            continue
        assert loc.found, f"no region contains feasible parameter {theta}"
        np.testing.assert_allclose(loc.z, ref.z_star, atol=tol)
        compared += 1
    return compared


# polyhedra

def test_box_contains_and_intersect():
    box = Polyhedron.box([-1.0, -1.0], [1.0, 1.0])
    assert box.contains([0.5, -1.0])
    assert not box.contains([1.1, 0.0])
    half = Polyhedron([[1.0, 0.0]], [0.0])
    assert not box.intersect(half).contains([0.5, 0.0])
    with pytest.raises(ValueError):
        Polyhedron.box([1.0], [0.0])


def test_remove_duplicate_row():
    box = Polyhedron.box([-1.0, -1.0], [1.0, 1.0])
    doubled = Polyhedron(np.vstack([box.A, box.A[:1]]), np.concatenate([box.b, box.b[:1]]))
    assert remove_redundant(doubled).A.shape[0] == 4


def test_remove_looser_parallel_row():
    reduced = remove_redundant(Polyhedron([[1.0], [1.0]], [1.0, 2.0]))
    np.testing.assert_allclose(reduced.A, [[1.0]])
    np.testing.assert_allclose(reduced.b, [1.0])


def test_removed_rows_are_certified_redundant():
    rng = np.random.default_rng(3)
    angles = rng.uniform(0, 2 * np.pi, size=10)
    A = np.column_stack([np.cos(angles), np.sin(angles)])
    b = rng.uniform(0.5, 2.0, size=10)
    poly = Polyhedron(np.vstack([A, np.vstack([np.eye(2), -np.eye(2)])]), np.concatenate([b, 3 * np.ones(4)]))
    kept = nonredundant_rows(poly)
    reduced = Polyhedron(poly.A[kept], poly.b[kept])
    for i in set(range(poly.A.shape[0])) - set(kept):
        res = solve_lp(-poly.A[i], reduced.A, reduced.b)
        assert res.status == OPTIMAL and -res.value <= poly.b[i] + 1e-9
    for i in kept:
        others = [j for j in kept if j != i]
        res = solve_lp(-poly.A[i], np.vstack([poly.A[others], poly.A[i]]),
                       np.concatenate([poly.b[others], [poly.b[i] + 1.0]]))
        assert -res.value > poly.b[i] + 1e-9


def test_empty_polyhedron_is_flagged():
    empty = Polyhedron([[1.0], [-1.0]], [-1.0, -1.0])
    assert is_empty(empty)
    assert remove_redundant(empty).empty
    assert not is_empty(Polyhedron.box([0.0], [1.0]))


def test_slab_is_nonempty_without_interior():
    slab = Polyhedron([[1.0], [-1.0]], [0.0, 0.0])
    assert not is_empty(slab)
    assert not has_interior(slab)
    assert has_interior(Polyhedron.box([0.0], [1.0]))


def test_bounding_box_and_sampling():
    triangle = Polyhedron([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]], [0.0, 0.0, 1.0])
    lower, upper = bounding_box(triangle)
    np.testing.assert_allclose(lower, [0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(upper, [1.0, 1.0], atol=1e-9)
    points = sample_parameters(triangle, 200, seed=1)
    assert points.shape == (200, 2)
    assert np.all(points.sum(axis=1) <= 1.0 + 1e-9)
    np.testing.assert_array_equal(points, sample_parameters(triangle, 200, seed=1))


def test_feasible_parameter_box(example1_mpc):
    box = feasible_parameter_box(example1_mpc, margin=0.0)
    lower, upper = bounding_box(box)
    # |x0 + u0| <= 4 with |u0| <= 1 bounds the state by 5
    np.testing.assert_allclose(lower, [-5.0], atol=1e-7)
    np.testing.assert_allclose(upper, [5.0], atol=1e-7)


# explicit solutions

def test_explicit_mpc_example1_has_five_regions(example1_mpc_solution):
    assert example1_mpc_solution.s == 5
    assert example1_mpc_solution.stats["unresolved_facets"] == 0


def test_explicit_beta_example1_has_five_regions(example1_beta):
    sol = explicit_solve(example1_beta, Polyhedron.box([-1.0, -4.0], [1.0, 4.0]))
    assert sol.s == 5


def test_unconstrained_region_law(example1_mpc_solution, example1_mpc):
    loc = evaluate(example1_mpc_solution, [0.0])
    assert loc.found
    np.testing.assert_allclose(loc.z, [0.0, 0.0], atol=1e-12)
    region = example1_mpc_solution.regions[loc.region_id]
    assert region.active_set == ()
    np.testing.assert_allclose(region.L, -np.linalg.solve(example1_mpc.H, example1_mpc.F), atol=1e-12)
    np.testing.assert_allclose(region.c, [0.0, 0.0], atol=1e-12)


def test_single_region_when_constraints_never_bind():
    qp = ParametricQP(H=np.eye(2), F=np.eye(2), G=np.vstack([np.eye(2), -np.eye(2)]),
                      E=np.zeros((4, 2)), d=100 * np.ones(4), strictly_convex=True)
    sol = explicit_solve(qp, Polyhedron.box([-1.0, -1.0], [1.0, 1.0]))
    assert sol.s == 1
    np.testing.assert_allclose(sol.regions[0].L, -np.eye(2))


def test_evaluate_outside_domain(example1_mpc_solution):
    loc = evaluate(example1_mpc_solution, [40.0])
    assert not loc.found and loc.z is None and loc.region_id == -1
    with pytest.raises(ValueError):
        evaluate(example1_mpc_solution, [0.0, 1.0])


def test_non_strictly_convex_input_is_rejected(example1_mpc):
    qp = ParametricQP(example1_mpc.H, example1_mpc.F, example1_mpc.G, example1_mpc.E, example1_mpc.d)
    with pytest.raises(ValueError, match="strictly convex"):
        explicit_solve(qp, Polyhedron.box([-4.0], [4.0]))


def test_regions_are_canonically_sorted(example1_mpc_solution):
    keys = [r.active_set for r in example1_mpc_solution.regions]
    assert keys == sorted(keys)


def test_result_does_not_depend_on_worker_count(example1_mpc):
    one = explicit_solve(example1_mpc, Polyhedron.box([-4.0], [4.0]), max_workers=1)
    four = explicit_solve(example1_mpc, Polyhedron.box([-4.0], [4.0]), max_workers=4)
    assert [r.active_set for r in one.regions] == [r.active_set for r in four.regions]


def test_mpc_oracle_equivalence(example1_mpc, example1_mpc_solution):
    assert assert_matches_oracle(example1_mpc, example1_mpc_solution) > 900


def test_beta_oracle_equivalence(example1_beta):
    sol = explicit_solve(example1_beta, Polyhedron.box([-1.0, -4.0], [1.0, 4.0]))
    assert assert_matches_oracle(example1_beta, sol) > 0


def test_regions_hold_feasibility_and_multiplier_sign(example1_mpc, example1_mpc_solution):
    for region in example1_mpc_solution.regions:
        for theta in sample_parameters(region.region, 20, seed=2):
            z = region.law(theta)
            assert np.all(example1_mpc.G @ z <= example1_mpc.bound(theta) + 1e-8)
            lam = region.multipliers(theta, example1_mpc.n_constraints)
            assert np.all(lam >= -1e-8)
            grad = example1_mpc.H @ z + example1_mpc.linear_term(theta) + example1_mpc.G.T @ lam
            np.testing.assert_allclose(grad, 0.0, atol=1e-8)


def test_regions_do_not_overlap(example1_mpc_solution):
    for theta in sample_parameters(example1_mpc_solution.domain, 500, seed=4):
        inside = [r.contains(theta, -1e-9) for r in example1_mpc_solution.regions]
        assert sum(inside) <= 1


def test_law_is_continuous_across_boundaries(example1_mpc_solution):
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b = rng.uniform(-4.0, 4.0, size=2)
        ts = np.linspace(a, b, 400)
        values = np.array([evaluate(example1_mpc_solution, [t]).z for t in ts])
        jumps = np.abs(np.diff(values, axis=0)).max()
        assert jumps <= 1e-6 + np.abs(ts[1] - ts[0]) * 2.0


@pytest.mark.slow
def test_double_integrator_mpc_has_33_regions(double_integrator, double_integrator_weights,
                                              double_integrator_constraints):
    qp = condense_mpc(double_integrator, double_integrator_weights, double_integrator_constraints, 5)
    sol = explicit_solve(qp, feasible_parameter_box(qp, margin=0.01))
    assert sol.s == 33
    assert sol.stats["param_rows"]
    assert_matches_oracle(qp, sol, n=1000, seed=1)


@pytest.mark.slow
def test_double_integrator_dpc_has_33_regions(double_integrator, double_integrator_weights,
                                              double_integrator_constraints):
    part = partition(generate_excitation(double_integrator, 17, seed=0), HorizonSpec(N_p=2, N_f=5, n=2))
    raw = build_dpc_raw(part, double_integrator_weights, double_integrator_constraints)
    qp = reduce_to_beta(raw, build_reduction_maps(part))
    sol = explicit_solve(qp, Polyhedron.box([-1, -1, -75, -75], [1, 1, 75, 75]))
    assert sol.s == 33
    assert assert_matches_oracle(qp, sol, n=1000, seed=2) > 0
