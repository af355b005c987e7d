import numpy as np
import pytest

from condense import (
    ConstraintSet, CostWeights, build_dpc_raw, build_reduction_maps, condense_mpc, eliminate_equalities,
    rank_report, reduce_to_beta,
)
from datamat import HorizonSpec, generate_excitation, min_data_length, partition
from mpqp import Polyhedron, explicit_solve, feasible_parameter_box, sample_parameters
from sysmodel import gamma_matrix, observability_index, random_model, simulate, simulate_states
from verify import (
    DPC, MPC, MPC_ONLINE, Controller, DomainExceededError, PastWindow, check_congruence, check_kkt_coupling,
    closed_loop, mapped_state, max_constraint_violation, project_past_window, sampled_equivalence,
    warm_up_window,
)


@pytest.fixture
def example1(example1_model, example1_data, example1_horizons, example1_weights, example1_constraints,
             example1_vp):
    part = partition(example1_data, example1_horizons)
    raw = build_dpc_raw(part, example1_weights, example1_constraints)
    maps = build_reduction_maps(part, Phi=2.0, V_p=example1_vp)
    return {
        "model": example1_model,
        "part": part,
        "maps": maps,
        "mpc": condense_mpc(example1_model, example1_weights, example1_constraints, 2),
        "alpha": eliminate_equalities(raw, maps),
        "beta": reduce_to_beta(raw, maps),
    }


@pytest.fixture
def example1_explicit(example1):
    mpc_sol = explicit_solve(example1["mpc"], feasible_parameter_box(example1["mpc"]))
    dpc_sol = explicit_solve(example1["beta"], Polyhedron.box([-1.0, -4.0], [1.0, 4.0]))
    return mpc_sol, dpc_sol


@pytest.fixture
def redundant_window_setup():
    """Past window longer than the state dimension, so W_p has a nontrivial left kernel."""
    model = random_model(2, 1, 1, seed=6)
    horizons = HorizonSpec(N_p=3, N_f=2, n=2)
    record = generate_excitation(model, min_data_length(1, 3, 2, 2) + 4, seed=2)
    part = partition(record, horizons)
    return model, part, build_reduction_maps(part)


# past windows

def test_past_window_layout_and_shift():
    window = PastWindow.from_signals([1.0, 2.0], [10.0, 20.0])
    assert window.N_p == 2
    shifted = window.shifted(3.0, 30.0)
    np.testing.assert_array_equal(shifted.xi, [2.0, 3.0, 20.0, 30.0])
    with pytest.raises(ValueError):
        PastWindow([1.0, 2.0, 3.0])


def test_projection_is_idempotent_and_orthogonal(redundant_window_setup):
    _, part, maps = redundant_window_setup
    xi = np.random.default_rng(0).normal(size=part.W_p.shape[0])
    once = project_past_window(part, maps, xi).xi
    twice = project_past_window(part, maps, once).xi
    np.testing.assert_allclose(twice, once, atol=1e-10)
    residual = xi - once
    np.testing.assert_allclose(part.W_p.T @ residual, 0.0, atol=1e-8)
    assert np.linalg.norm(residual) > 1e-6


def test_mapped_state_of_a_recorded_window(redundant_window_setup):
    model, part, maps = redundant_window_setup
    rng = np.random.default_rng(4)
    x_start, u = rng.normal(size=2), rng.normal(size=3)
    y = simulate(model, x_start, u)
    x_true = simulate_states(model, x_start, u)[-1]
    xi = np.concatenate([u, y])
    np.testing.assert_allclose(project_past_window(part, maps, xi).xi, xi, atol=1e-9)
    np.testing.assert_allclose(mapped_state(model, part, maps, xi), x_true, atol=1e-8)


def test_warm_up_window_ends_in_state(double_integrator):
    window = warm_up_window(double_integrator, [1.0, -0.5], 2)
    np.testing.assert_array_equal(window.u_p, [0.0, 0.0])
    np.testing.assert_allclose(gamma_matrix(double_integrator, 2) @ window.xi, [1.0, -0.5], atol=1e-12)


# KKT coupling

def test_coupling_at_origin(example1):
    report = check_kkt_coupling(example1["mpc"], example1["beta"], example1["maps"], example1["part"],
                                example1["model"], [0.0, 0.0])
    assert report.passed
    assert report.uf_residual <= 1e-12
    np.testing.assert_allclose(report.x0_mapped, [0.0], atol=1e-12)


def test_coupling_with_active_input_bound(example1):
    report = check_kkt_coupling(example1["mpc"], example1["beta"], example1["maps"], example1["part"],
                                example1["model"], [1.0, 2.1])
    np.testing.assert_allclose(report.x0_mapped, [2.32], atol=1e-12)
    assert report.passed and report.nondegenerate
    assert report.uf_residual <= 1e-8 and report.lambda_residual <= 1e-8


def test_coupling_on_sampled_windows(example1):
    windows = sample_parameters(Polyhedron.box([-1.0, -4.0], [1.0, 4.0]), 500, seed=7)
    solved = 0
    for xi in windows:
        report = check_kkt_coupling(example1["mpc"], example1["beta"], example1["maps"], example1["part"],
                                    example1["model"], xi)
        if report.status != "optimal":
            assert not report.passed
            continue
        solved += 1
        assert report.uf_residual <= 1e-6
        if report.nondegenerate:
            assert report.passed
    assert solved > 400


@pytest.mark.slow
def test_coupling_on_random_plants():
    rng = np.random.default_rng(21)
    weights = CostWeights(Q=1.0, R=0.1)
    cons = ConstraintSet.box(1.0, 10.0)
    for seed in range(100):
        n = int(rng.integers(1, 4))
        model = random_model(n, 1, 1, seed=seed)
        N_p, N_f = observability_index(model), 3
        horizons = HorizonSpec(N_p=N_p, N_f=N_f, n=n)
        record = generate_excitation(model, min_data_length(1, N_p, N_f, n) + 5, seed=seed)
        part = partition(record, horizons)
        maps = build_reduction_maps(part)
        assert rank_report(part, maps, m=1, n=n, N_p=N_p, N_f=N_f).passed
        mpc = condense_mpc(model, weights, cons, N_f)
        beta = reduce_to_beta(build_dpc_raw(part, weights, cons), maps)
        checked = 0
        for xi in rng.uniform(-1.0, 1.0, size=(50, 2 * N_p)):
            report = check_kkt_coupling(mpc, beta, maps, part, model, xi)
            if report.status != "optimal" or not report.nondegenerate:
                continue
            assert report.passed, f"plant seed {seed}: {report.to_dict()}"
            checked += 1
            if checked == 10:
                break
        assert checked == 10, f"plant seed {seed}: only {checked} non-degenerate windows"


# congruence

def test_congruence_example1(example1):
    report = check_congruence(example1["mpc"], example1["alpha"], example1["beta"], example1["maps"],
                              example1["part"], example1["model"])
    assert report.passed(1e-8), report.residuals
    assert "irrelevant_H" in report.residuals
    assert report.to_dict()["max_residual"] == report.max_residual


def test_congruence_double_integrator(double_integrator, double_integrator_weights,
                                      double_integrator_constraints):
    part = partition(generate_excitation(double_integrator, 17, seed=0), HorizonSpec(N_p=2, N_f=5, n=2))
    maps = build_reduction_maps(part)
    raw = build_dpc_raw(part, double_integrator_weights, double_integrator_constraints)
    report = check_congruence(
        condense_mpc(double_integrator, double_integrator_weights, double_integrator_constraints, 5),
        eliminate_equalities(raw, maps), reduce_to_beta(raw, maps), maps, part, double_integrator,
    )
    assert report.passed(1e-8), report.residuals


# sampled equivalence

def test_sampled_equivalence_example1(example1, example1_explicit):
    mpc_sol, dpc_sol = example1_explicit
    report = sampled_equivalence(mpc_sol, dpc_sol, example1["maps"], example1["part"], example1["model"],
                                 n_samples=1000, seed=3)
    assert report.samples == 1000
    assert report.max_uf_deviation <= 1e-6


def test_sampled_equivalence_without_samples(example1, example1_explicit):
    mpc_sol, dpc_sol = example1_explicit
    report = sampled_equivalence(mpc_sol, dpc_sol, example1["maps"], example1["part"], example1["model"],
                                 n_samples=0)
    assert (report.samples, report.max_uf_deviation) == (0, 0.0)


def test_sampled_equivalence_inside_one_region(example1, example1_explicit):
    mpc_sol, dpc_sol = example1_explicit
    region = dpc_sol.regions[-1]
    report = sampled_equivalence(mpc_sol, dpc_sol, example1["maps"], example1["part"], example1["model"],
                                 n_samples=200, seed=5, domain=region.region)
    assert report.samples == 200
    assert report.max_uf_deviation <= 1e-6


# closed loop

def test_controller_validation(example1, example1_explicit):
    with pytest.raises(ValueError, match="kind"):
        Controller("lqr")
    with pytest.raises(ValueError):
        Controller(MPC)
    with pytest.raises(ValueError):
        Controller(DPC, solution=example1_explicit[1])


def test_closed_loop_at_rest(example1_model, example1_explicit):
    traj = closed_loop(example1_model, Controller(MPC, solution=example1_explicit[0]), [0.0], 5)
    assert traj.steps == 5
    np.testing.assert_array_equal(traj.inputs, np.zeros((5, 1)))
    np.testing.assert_array_equal(traj.states, np.zeros((6, 1)))


def test_closed_loop_controllers_agree_example1(example1, example1_explicit, example1_constraints):
    mpc_sol, dpc_sol = example1_explicit
    model = example1["model"]
    runs = {
        MPC: closed_loop(model, Controller(MPC, solution=mpc_sol), [3.0], 15),
        MPC_ONLINE: closed_loop(model, Controller(MPC_ONLINE, qp=example1["mpc"]), [3.0], 15),
        DPC: closed_loop(model, Controller(DPC, solution=dpc_sol, maps=example1["maps"], part=example1["part"]),
                         [3.0], 15),
    }
    np.testing.assert_allclose(runs[MPC].inputs[0], [-1.0], atol=1e-9)
    for kind in (MPC_ONLINE, DPC):
        np.testing.assert_allclose(runs[kind].inputs, runs[MPC].inputs, atol=1e-6)
        np.testing.assert_allclose(runs[kind].states, runs[MPC].states, atol=1e-6)
    for traj in runs.values():
        assert max_constraint_violation(traj, example1_constraints) <= 1e-8
    assert abs(runs[MPC].states[-1, 0]) < 1e-2


def test_closed_loop_leaves_explicit_domain(example1_model, example1):
    narrow = explicit_solve(example1["mpc"], Polyhedron.box([-4.0], [4.0]))
    with pytest.raises(DomainExceededError, match="explicit domain exceeded at step 0"):
        closed_loop(example1_model, Controller(MPC, solution=narrow), [4.5], 3)


def test_trajectory_frame(example1_model, example1_explicit):
    traj = closed_loop(example1_model, Controller(MPC, solution=example1_explicit[0]), [2.0], 4)
    frame = traj.to_frame()
    assert list(frame.columns) == ["step", "x0", "u0", "y0", "region_id"]
    assert len(frame) == 4
    assert (frame["region_id"] >= 0).all()


def test_constraint_violation_is_measured(example1_model, example1, example1_constraints):
    traj = closed_loop(example1_model, Controller(MPC_ONLINE, qp=example1["mpc"]), [1.0], 3)
    traj.outputs[1, 0] = 4.5
    assert max_constraint_violation(traj, example1_constraints) == pytest.approx(0.5)


@pytest.mark.slow
def test_double_integrator_closed_loop(double_integrator, double_integrator_weights,
                                       double_integrator_constraints):
    part = partition(generate_excitation(double_integrator, 17, seed=0), HorizonSpec(N_p=2, N_f=5, n=2))
    maps = build_reduction_maps(part)
    beta = reduce_to_beta(build_dpc_raw(part, double_integrator_weights, double_integrator_constraints), maps)
    mpc = condense_mpc(double_integrator, double_integrator_weights, double_integrator_constraints, 5)
    mpc_sol = explicit_solve(mpc, feasible_parameter_box(mpc))
    dpc_sol = explicit_solve(beta, Polyhedron.box([-1, -1, -75, -75], [1, 1, 75, 75]))
    assert mpc_sol.s == 33 and dpc_sol.s == 33

    runs = [
        closed_loop(double_integrator, Controller(MPC, solution=mpc_sol), [1.0, 0.0], 30),
        closed_loop(double_integrator, Controller(DPC, solution=dpc_sol, maps=maps, part=part), [1.0, 0.0], 30),
        closed_loop(double_integrator, Controller(MPC_ONLINE, qp=mpc), [1.0, 0.0], 30),
    ]
    for traj in runs[1:]:
        np.testing.assert_allclose(traj.inputs, runs[0].inputs, atol=1e-6)
    for traj in runs:
        assert max_constraint_violation(traj, double_integrator_constraints) <= 1e-8

    report = sampled_equivalence(mpc_sol, dpc_sol, maps, part, double_integrator, n_samples=1000, seed=1)
    assert report.samples == 1000
    assert report.max_uf_deviation <= 1e-6
