#!/usr/bin/env python3
"""
Numerical checks that model-based and data-driven predictive control coincide:
KKT coupling, the congruence relations between the two QPs, sampled equivalence of
the explicit laws and closed-loop runs of explicit / online controllers.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

import settings
from condense import ConstraintSet, ParametricQP, ReductionMaps, recover_uf
from datamat import HankelPartition
from linalg_tools import as_vector, numerical_rank
from mpqp import ExplicitSolution, Polyhedron, evaluate, sample_parameters
from qpcore import INFEASIBLE, QPSolution, solve_qp
from sysmodel import (
    SystemModel, gamma_matrix, observability_matrix, preimage_state, simulate, toeplitz_matrix,
)

logger = logging.getLogger(__name__)

MPC = "mpc"
DPC = "dpc"
MPC_ONLINE = "mpc-online"
CONTROLLER_KINDS = (MPC, DPC, MPC_ONLINE)


class DomainExceededError(RuntimeError):
    """The closed loop reached a parameter outside every critical region."""


@dataclass(frozen=True)
class PastWindow:
    """xi = (u_p; y_p): the N_p most recent inputs stacked over the N_p most recent outputs."""
    xi: np.ndarray
    m: int = 1
    p: int = 1

    def __post_init__(self):
        object.__setattr__(self, "xi", as_vector(self.xi, "xi"))
        if self.xi.size % (self.m + self.p):
            raise ValueError(f"window length {self.xi.size} is not a multiple of m+p={self.m + self.p}")

    @property
    def N_p(self) -> int:
        return self.xi.size // (self.m + self.p)

    @property
    def u_p(self) -> np.ndarray:
        return self.xi[:self.m * self.N_p]

    @property
    def y_p(self) -> np.ndarray:
        return self.xi[self.m * self.N_p:]

    @classmethod
    def from_signals(cls, u_p, y_p, m: int = 1, p: int = 1) -> "PastWindow":
        return cls(np.concatenate([as_vector(u_p, "u_p"), as_vector(y_p, "y_p")]), m, p)

    def shifted(self, u, y) -> "PastWindow":
        """Drop the oldest step and append (u, y)."""
        u_p = np.concatenate([self.u_p[self.m:], as_vector(u, "u")])
        y_p = np.concatenate([self.y_p[self.p:], as_vector(y, "y")])
        return PastWindow.from_signals(u_p, y_p, self.m, self.p)


@dataclass
class CouplingReport:
    uf_residual: float
    lambda_residual: float
    x0_mapped: np.ndarray
    passed: bool
    status: str = "optimal"
    nondegenerate: bool = True

    def to_dict(self) -> dict:
        return {
            "uf_residual": self.uf_residual, "lambda_residual": self.lambda_residual,
            "x0_mapped": np.asarray(self.x0_mapped).tolist(), "passed": self.passed,
            "status": self.status, "nondegenerate": self.nondegenerate,
        }


@dataclass
class EquivalenceReport:
    max_uf_deviation: float
    samples: int
    skipped: int = 0

    def to_dict(self) -> dict:
        return {"max_uf_deviation": self.max_uf_deviation, "samples": self.samples, "skipped": self.skipped}


@dataclass
class CongruenceReport:
    """Residuals (max abs, relative to the compared matrix) of the structural identities."""
    residuals: dict = field(default_factory=dict)

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)

    def passed(self, tol: float = 1e-8) -> bool:
        return self.max_residual <= tol

    def to_dict(self) -> dict:
        return {"residuals": dict(self.residuals), "max_residual": self.max_residual}


@dataclass
class Controller:
    """Receding-horizon controller: an explicit law (mpc / dpc) or a per-step numeric solve."""
    kind: str
    solution: ExplicitSolution | None = None
    qp: ParametricQP | None = None
    maps: ReductionMaps | None = None
    part: HankelPartition | None = None

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"controller kind must be one of {CONTROLLER_KINDS}, got {self.kind!r}")
        if self.kind in (MPC, DPC) and self.solution is None:
            raise ValueError(f"{self.kind} controller needs an explicit solution")
        if self.kind == MPC_ONLINE and self.qp is None:
            raise ValueError("mpc-online controller needs the condensed QP")
        if self.kind == DPC and (self.maps is None or self.part is None):
            raise ValueError("dpc controller needs the reduction maps and the data partition")


@dataclass
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    parameters: list = field(default_factory=list)
    region_ids: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]

    def to_frame(self) -> pd.DataFrame:
        """One row per step: state before the step, applied input, measured output, region."""
        data = {"step": np.arange(self.steps)}
        for i in range(self.states.shape[1]):
            data[f"x{i}"] = self.states[:-1, i]
        for j in range(self.inputs.shape[1]):
            data[f"u{j}"] = self.inputs[:, j]
        for j in range(self.outputs.shape[1]):
            data[f"y{j}"] = self.outputs[:, j]
        data["region_id"] = self.region_ids if self.region_ids else [-1] * self.steps
        return pd.DataFrame(data)


def _max_abs(M) -> float:
    return float(np.abs(M).max(initial=0.0))


def _relative(lhs, rhs) -> float:
    return _max_abs(np.asarray(lhs) - np.asarray(rhs)) / max(1.0, _max_abs(lhs), _max_abs(rhs))


def project_past_window(part: HankelPartition, maps: ReductionMaps, xi) -> PastWindow:
    """W_p W_p^+ xi: the nearest window the recorded data can explain."""
    window = xi if isinstance(xi, PastWindow) else PastWindow(xi, part.m, part.p)
    return PastWindow(part.W_p @ (maps.W_p_pinv @ window.xi), part.m, part.p)


def mapped_state(model: SystemModel, part: HankelPartition, maps: ReductionMaps, xi, tol_rank=None) -> np.ndarray:
    """x0 = Gamma W_p W_p^+ xi."""
    return gamma_matrix(model, part.N_p, tol_rank) @ project_past_window(part, maps, xi).xi


def is_nondegenerate(qp: ParametricQP, theta, solution: QPSolution, tol: float | None = None,
                     rows=None) -> bool:
    """LICQ and strict complementarity at the optimum (multipliers unique and active set stable)."""
    tol = settings.TOL_OPT if tol is None else tol
    if not solution.optimal:
        return False
    rows = np.arange(qp.n_constraints) if rows is None else np.asarray(rows)
    active = list(solution.active_set)
    G = qp.G[rows]
    if active and numerical_rank(G[active]) < len(active):
        return False
    lam = solution.lambda_star
    if active and np.min(lam[active]) <= 10 * tol:
        return False
    slack = qp.bound(theta)[rows] - G @ solution.z_star
    inactive = np.setdiff1d(np.arange(rows.size), active)
    # weakly active constraints make the active set ambiguous
    return not np.any(slack[inactive] <= 1e3 * tol * (1.0 + np.abs(qp.bound(theta)[rows][inactive])))


def _solve_at(qp: ParametricQP, theta, tol: float | None) -> tuple[QPSolution, np.ndarray]:
    """Numeric solve over the rows that carry a decision gradient; multipliers expanded to every row."""
    zero = qp.zero_rows()
    rows = np.setdiff1d(np.arange(qp.n_constraints), zero)
    tol_feas = settings.TOL_OPT if tol is None else tol
    if zero.size and np.any(qp.bound(theta)[zero] < -tol_feas):
        # parameter-only rows violated: no decision can repair them
        return QPSolution(np.full(qp.n_z, np.nan), np.zeros(rows.size), (), INFEASIBLE), np.zeros(qp.n_constraints)
    sol = solve_qp(qp.H, qp.linear_term(theta), qp.G[rows], qp.bound(theta)[rows], tol=tol)
    lam = np.zeros(qp.n_constraints)
    lam[rows] = sol.lambda_star
    return sol, lam


def check_kkt_coupling(mpc: ParametricQP, beta_qp: ParametricQP, maps: ReductionMaps, part: HankelPartition,
                       model: SystemModel, xi, tol: float = 1e-6, tol_opt: float | None = None) -> CouplingReport:
    """Solve both QPs numerically at xi and x0 = Gamma W_p W_p^+ xi and compare u_f and multipliers."""
    window = xi if isinstance(xi, PastWindow) else PastWindow(xi, part.m, part.p)
    x0 = mapped_state(model, part, maps, window)
    mpc_sol, mpc_lam = _solve_at(mpc, x0, tol_opt)
    beta_sol, beta_lam = _solve_at(beta_qp, window.xi, tol_opt)

    if not mpc_sol.optimal or not beta_sol.optimal:
        status = f"mpc {mpc_sol.status}, beta {beta_sol.status}"
        logger.debug(f"coupling check at xi={window.xi.tolist()} not solvable: {status}")
        return CouplingReport(np.inf, np.inf, x0, False, status, False)

    u_f = recover_uf(maps, part.U_f, window.xi, beta_sol.z_star)
    uf_residual = _max_abs(mpc_sol.z_star - u_f)
    lambda_residual = _max_abs(mpc_lam - beta_lam)
    mpc_rows = np.setdiff1d(np.arange(mpc.n_constraints), mpc.zero_rows())
    beta_rows = np.setdiff1d(np.arange(beta_qp.n_constraints), beta_qp.zero_rows())
    nondegenerate = (is_nondegenerate(mpc, x0, mpc_sol, tol_opt, mpc_rows)
                     and is_nondegenerate(beta_qp, window.xi, beta_sol, tol_opt, beta_rows))
    return CouplingReport(
        uf_residual=uf_residual,
        lambda_residual=lambda_residual,
        x0_mapped=x0,
        passed=uf_residual <= tol and lambda_residual <= tol,
        nondegenerate=nondegenerate,
    )


def check_congruence(mpc: ParametricQP, alpha_qp: ParametricQP, beta_qp: ParametricQP, maps: ReductionMaps,
                     part: HankelPartition, model: SystemModel, tol_rank: float | None = None) -> CongruenceReport:
    """Shift, null-space, irrelevance and congruence identities linking the MPC and the reduced DPC QPs."""
    O = observability_matrix(model, part.N_f)
    T_N = toeplitz_matrix(model, part.N_f)
    Gamma = gamma_matrix(model, part.N_p, tol_rank)
    proj = part.W_p @ maps.W_p_pinv
    T = maps.T
    UfWpinv = part.U_f @ maps.W_p_pinv
    V_f = maps.V_f

    r = {
        "shift": _relative(part.Y_f, O @ Gamma @ part.W_p + T_N @ part.U_f),
        "kernel": _relative(part.W_p @ maps.V_p, np.zeros((part.W_p.shape[0], maps.nu))),
        "output_kernel": _relative(part.Y_f @ maps.V_p, T_N @ maps.U_fV_p),
        "H_check": _relative(beta_qp.H, T.T @ mpc.H @ T),
        "F_check": _relative(beta_qp.F, T.T @ mpc.F @ Gamma @ proj + T.T @ mpc.H @ UfWpinv),
        "G_check": _relative(beta_qp.G, mpc.G @ T),
        "E_hat": _relative(beta_qp.E, mpc.E @ Gamma @ proj - mpc.G @ UfWpinv),
    }
    if V_f.shape[1]:
        r.update({
            "irrelevant_inputs": _max_abs(maps.U_fV_p @ V_f),
            "irrelevant_outputs": _max_abs(part.Y_f @ maps.V_p @ V_f) / max(1.0, _max_abs(part.Y_f)),
            "irrelevant_H": _max_abs(alpha_qp.H @ V_f) / max(1.0, _max_abs(alpha_qp.H)),
            "irrelevant_F": _max_abs(alpha_qp.F.T @ V_f) / max(1.0, _max_abs(alpha_qp.F)),
            "irrelevant_G": _max_abs(alpha_qp.G @ V_f) / max(1.0, _max_abs(alpha_qp.G)),
        })
    report = CongruenceReport(r)
    logger.debug(f"congruence residuals: {report.residuals}")
    return report


def sampled_equivalence(mpc_sol: ExplicitSolution, dpc_sol: ExplicitSolution, maps: ReductionMaps,
                        part: HankelPartition, model: SystemModel, n_samples: int = 1000,
                        seed: int | None = None, domain: Polyhedron | None = None,
                        max_rounds: int = 20) -> EquivalenceReport:
    """
    Compare the recovered explicit DPC input sequence with the explicit MPC law at the mapped state.

    Samples are drawn uniformly from `domain` (default: the DPC exploration domain); windows where
    either law is undefined are skipped until n_samples comparisons were made or the draw budget ends.
    """
    if n_samples <= 0:
        return EquivalenceReport(0.0, 0, 0)
    domain = dpc_sol.domain if domain is None else domain
    rng_seed = settings.SEED if seed is None else seed
    Gamma = gamma_matrix(model, part.N_p)
    proj = part.W_p @ maps.W_p_pinv

    deviation, compared, skipped = 0.0, 0, 0
    for round_ in range(max_rounds):
        for xi in sample_parameters(domain, n_samples, seed=rng_seed + round_):
            dpc = evaluate(dpc_sol, xi)
            if not dpc.found:
                skipped += 1
                continue
            mpc = evaluate(mpc_sol, Gamma @ proj @ xi)
            if not mpc.found:
                skipped += 1
                continue
            u_f = recover_uf(maps, part.U_f, xi, dpc.z)
            deviation = max(deviation, _max_abs(u_f - mpc.z))
            compared += 1
            if compared == n_samples:
                break
        if compared == n_samples:
            break
    logger.info(f"sampled equivalence: max |u_f deviation| = {deviation:.3e} over {compared} samples "
                f"({skipped} outside a partition)")
    return EquivalenceReport(deviation, compared, skipped)


def warm_up_window(model: SystemModel, x0, N_p: int) -> PastWindow:
    """Window of N_p zero-input steps that ends exactly in x0."""
    start = preimage_state(model, x0, N_p)
    u_p = np.zeros(model.m * N_p)
    return PastWindow.from_signals(u_p, simulate(model, start, u_p), model.m, model.p)


def closed_loop(model: SystemModel, controller: Controller, x0, steps: int, xi=None) -> Trajectory:
    """Apply the first input of the optimal sequence each step and record every signal."""
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    x = as_vector(x0, "x0")
    if x.size != model.n:
        raise ValueError(f"x0 must have length n={model.n}, got {x.size}")
    m = model.m
    window = None
    if controller.kind == DPC:
        N_p = controller.part.N_p
        window = warm_up_window(model, x, N_p) if xi is None else PastWindow(xi, model.m, model.p)

    states, inputs, outputs, params, regions = [x.copy()], [], [], [], []
    for k in range(steps):
        theta = window.xi if controller.kind == DPC else x
        if controller.kind == MPC_ONLINE:
            sol, _ = _solve_at(controller.qp, theta, None)
            if not sol.optimal:
                raise DomainExceededError(f"numeric MPC {sol.status} at step {k} (x={x.tolist()})")
            z, region_id = sol.z_star, -1
        else:
            loc = evaluate(controller.solution, theta)
            if not loc.found:
                raise DomainExceededError(
                    f"explicit domain exceeded at step {k}: parameter {np.round(theta, 6).tolist()} "
                    f"lies outside all {controller.solution.s} regions"
                )
            z, region_id = loc.z, loc.region_id
        u_f = recover_uf(controller.maps, controller.part.U_f, theta, z) if controller.kind == DPC else z
        u = u_f[:m]
        y = model.C @ x + model.D @ u
        x = model.A @ x + model.B @ u
        if window is not None:
            window = window.shifted(u, y)
        states.append(x.copy())
        inputs.append(u)
        outputs.append(y)
        params.append(np.asarray(theta).copy())
        regions.append(region_id)

    logger.debug(f"closed loop ({controller.kind}): {steps} steps from x0={as_vector(x0).tolist()}")
    return Trajectory(
        states=np.array(states),
        inputs=np.array(inputs).reshape(steps, m),
        outputs=np.array(outputs).reshape(steps, model.p),
        parameters=params,
        region_ids=regions,
    )


def max_constraint_violation(traj: Trajectory, cons: ConstraintSet) -> float:
    """Largest violation of M_u u(k) <= v_u and M_y y(k) <= v_y along the run (0 when satisfied)."""
    if traj.steps == 0:
        return 0.0
    u_gap = traj.inputs @ cons.M_u.T - cons.v_u
    y_gap = traj.outputs @ cons.M_y.T - cons.v_y
    return float(max(0.0, u_gap.max(), y_gap.max()))
