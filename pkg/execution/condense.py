#!/usr/bin/env python3
"""
The four quadratic programs of model-based and data-driven predictive control.

    condense_mpc     QP in u_f with parameter x0        (strictly convex)
    build_dpc_raw    QP in a with W_p a = xi            (only convex)
    eliminate_equalities  QP in alpha = coordinates of ker(W_p)
    reduce_to_beta   QP in beta, dimension m*N_f        (strictly convex)

All parametric QPs share one shape:
    min 1/2 z'Hz + theta'F'z   s.t.  Gz <= E theta + d
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

import settings
from datamat import HankelPartition
from linalg_tools import (
    as_matrix, as_vector, clip_psd, is_positive_definite, is_positive_semidefinite, is_symmetric,
    numerical_rank, symmetrize,
)
from qpcore import OPTIMAL, solve_lp
from sysmodel import SystemModel, observability_matrix, toeplitz_matrix

logger = logging.getLogger(__name__)


class DegenerateReductionError(RuntimeError):
    """The reduced Hessian is not positive definite (data assumptions broken)."""


@dataclass(frozen=True)
class ConstraintSet:
    """Per-step polyhedral constraints M_u u(k) <= v_u and M_y y(k) <= v_y."""
    M_u: np.ndarray
    v_u: np.ndarray
    M_y: np.ndarray
    v_y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "M_u", as_matrix(self.M_u, "M_u"))
        object.__setattr__(self, "M_y", as_matrix(self.M_y, "M_y"))
        object.__setattr__(self, "v_u", as_vector(self.v_u, "v_u"))
        object.__setattr__(self, "v_y", as_vector(self.v_y, "v_y"))
        # a single bound row like (1, -1) is given as a row vector; read it as a column
        if self.M_u.shape[0] == 1 and self.v_u.size == self.M_u.shape[1] and self.v_u.size > 1:
            object.__setattr__(self, "M_u", self.M_u.T)
        if self.M_y.shape[0] == 1 and self.v_y.size == self.M_y.shape[1] and self.v_y.size > 1:
            object.__setattr__(self, "M_y", self.M_y.T)
        if self.M_u.shape[0] != self.v_u.size:
            raise ValueError(f"M_u has {self.M_u.shape[0]} rows but v_u has {self.v_u.size} entries")
        if self.M_y.shape[0] != self.v_y.size:
            raise ValueError(f"M_y has {self.M_y.shape[0]} rows but v_y has {self.v_y.size} entries")

    @property
    def m(self) -> int:
        return self.M_u.shape[1]

    @property
    def p(self) -> int:
        return self.M_y.shape[1]

    @classmethod
    def box(cls, u_max, y_max, m: int = 1, p: int = 1) -> "ConstraintSet":
        """Symmetric boxes |u_i| <= u_max, |y_i| <= y_max."""
        u_max = np.broadcast_to(as_vector(u_max), (m,))
        y_max = np.broadcast_to(as_vector(y_max), (p,))
        return cls(
            np.vstack([np.eye(m), -np.eye(m)]), np.concatenate([u_max, u_max]),
            np.vstack([np.eye(p), -np.eye(p)]), np.concatenate([y_max, y_max]),
        )

    def stacked(self, N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Block-diagonal M_u-stack, M_y-stack and the right-hand side d over N steps."""
        Mu = scipy.linalg.block_diag(*[self.M_u] * N)
        My = scipy.linalg.block_diag(*[self.M_y] * N)
        d = np.concatenate([np.tile(self.v_u, N), np.tile(self.v_y, N)])
        return Mu, My, d

    def to_dict(self) -> dict:
        return {key: getattr(self, key).tolist() for key in ("M_u", "v_u", "M_y", "v_y")}


@dataclass(frozen=True)
class CostWeights:
    """Stage weights: Q symmetric PSD (p x p), R symmetric PD (m x m)."""
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Q", as_matrix(self.Q, "Q"))
        object.__setattr__(self, "R", as_matrix(self.R, "R"))
        if not is_symmetric(self.Q) or not is_symmetric(self.R):
            raise ValueError("Q and R must be symmetric")
        if not is_positive_semidefinite(self.Q):
            raise ValueError("Q must be positive semi-definite")
        if not is_positive_definite(self.R):
            raise ValueError("R must be positive definite")

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def p(self) -> int:
        return self.Q.shape[0]

    def stacked(self, N: int) -> tuple[np.ndarray, np.ndarray]:
        return scipy.linalg.block_diag(*[self.Q] * N), scipy.linalg.block_diag(*[self.R] * N)

    def to_dict(self) -> dict:
        return {"Q": self.Q.tolist(), "R": self.R.tolist()}


@dataclass
class ParametricQP:
    """min 1/2 z'Hz + theta'F'z  s.t.  Gz <= E theta + d."""
    H: np.ndarray
    F: np.ndarray
    G: np.ndarray
    E: np.ndarray
    d: np.ndarray
    strictly_convex: bool = False
    name: str = "qp"

    def __post_init__(self):
        self.H = symmetrize(np.atleast_2d(np.asarray(self.H, dtype=float)))
        n_z = self.H.shape[0]
        self.d = as_vector(self.d, "d")
        q = self.d.size
        self.F = np.asarray(self.F, dtype=float)
        if self.F.ndim < 2:
            self.F = self.F.reshape(n_z, -1)
        self.G = np.asarray(self.G, dtype=float)
        if self.G.ndim < 2:
            self.G = self.G.reshape(q, n_z)
        self.E = np.asarray(self.E, dtype=float)
        if self.E.ndim < 2:
            self.E = self.E.reshape(q, self.F.shape[1])
        if self.F.shape[0] != n_z or self.G.shape != (q, n_z) or self.E.shape != (q, self.F.shape[1]):
            raise ValueError(
                f"{self.name}: inconsistent shapes H{self.H.shape} F{self.F.shape} "
                f"G{self.G.shape} E{self.E.shape} d({q},)"
            )
        if self.strictly_convex and not is_positive_definite(self.H):
            raise ValueError(f"{self.name}: H is not positive definite")

    @property
    def n_z(self) -> int:
        return self.H.shape[0]

    @property
    def n_theta(self) -> int:
        return self.F.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.d.size

    def linear_term(self, theta) -> np.ndarray:
        return self.F @ as_vector(theta, "theta")

    def bound(self, theta) -> np.ndarray:
        return self.E @ as_vector(theta, "theta") + self.d

    def objective(self, z, theta) -> float:
        z = as_vector(z, "z")
        return float(0.5 * z @ self.H @ z + self.linear_term(theta) @ z)

    def zero_rows(self, tol: float = 1e-10) -> np.ndarray:
        """Rows whose decision gradient vanishes relative to the largest row."""
        norms = np.abs(self.G).max(axis=1) if self.G.size else np.zeros(self.n_constraints)
        scale = max(float(norms.max(initial=0.0)), 1e-300)
        return np.flatnonzero(norms <= tol * scale)


@dataclass
class DpcRawQP:
    """min 1/2 a'H~a  s.t.  G~a <= d,  W_p a = xi."""
    H_tilde: np.ndarray
    G_tilde: np.ndarray
    d: np.ndarray
    W_p: np.ndarray

    @property
    def l(self) -> int:
        return self.H_tilde.shape[0]

    @property
    def n_theta(self) -> int:
        return self.W_p.shape[0]


@dataclass
class ReductionMaps:
    """W_p^+, V_p and K_f tying the a-, alpha- and beta-parametrizations together."""
    W_p_pinv: np.ndarray
    V_p: np.ndarray
    K_f: np.ndarray
    Phi: np.ndarray
    U_fV_p: np.ndarray
    tol_rank: float | None = None

    @property
    def nu(self) -> int:
        return self.V_p.shape[1]

    @property
    def mu(self) -> int:
        return self.K_f.shape[1]

    @cached_property
    def V_f(self) -> np.ndarray:
        """Basis of ker(U_f V_p): directions that leave u_f and y_f unchanged."""
        return nullspace_basis(self.U_fV_p, self.tol_rank)

    @property
    def T(self) -> np.ndarray:
        """U_f V_p K_f, the non-singular map from beta to the free part of u_f."""
        return self.U_fV_p @ self.K_f


@dataclass
class RankReport:
    rank_Wp: int
    nu: int
    rank_UfVp: int
    l: int
    expected_rank_Wp: int
    expected_nu: int
    expected_mu: int
    flags: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.flags

    def to_dict(self) -> dict:
        return {
            "rank_Wp": self.rank_Wp, "nu": self.nu, "rank_UfVp": self.rank_UfVp, "l": self.l,
            "expected_rank_Wp": self.expected_rank_Wp, "expected_nu": self.expected_nu,
            "expected_mu": self.expected_mu, "flags": list(self.flags), "passed": self.passed,
        }


def condense_mpc(model: SystemModel, weights: CostWeights, cons: ConstraintSet, N_f: int) -> ParametricQP:
    """Condensed MPC QP in u_f with the current state x0 as parameter."""
    if N_f < 1:
        raise ValueError(f"N_f must be positive, got {N_f}")
    if weights.m != model.m or weights.p != model.p or cons.m != model.m or cons.p != model.p:
        raise ValueError("weights and constraints do not match the model dimensions")
    if not is_positive_definite(weights.R):
        raise ValueError("R must be positive definite")
    O = observability_matrix(model, N_f)
    T = toeplitz_matrix(model, N_f)
    Qs, Rs = weights.stacked(N_f)
    Mu, My, d = cons.stacked(N_f)
    H = 2 * T.T @ Qs @ T + 2 * Rs
    F = 2 * T.T @ Qs @ O
    G = np.vstack([Mu, My @ T])
    E = np.vstack([np.zeros((Mu.shape[0], model.n)), -My @ O])
    qp = ParametricQP(H, F, G, E, d, strictly_convex=True, name="mpc")
    logger.debug(f"condensed MPC QP: n_z={qp.n_z}, n_theta={qp.n_theta}, constraints={qp.n_constraints}")
    return qp


def build_dpc_raw(part: HankelPartition, weights: CostWeights, cons: ConstraintSet) -> DpcRawQP:
    if weights.m != part.m or weights.p != part.p or cons.m != part.m or cons.p != part.p:
        raise ValueError("weights and constraints do not match the data dimensions")
    Qs, Rs = weights.stacked(part.N_f)
    Mu, My, d = cons.stacked(part.N_f)
    H_tilde = clip_psd(2 * part.Y_f.T @ Qs @ part.Y_f + 2 * part.U_f.T @ Rs @ part.U_f)
    G_tilde = np.vstack([Mu @ part.U_f, My @ part.Y_f])
    return DpcRawQP(H_tilde, G_tilde, d, part.W_p.copy())


def pseudoinverse(M, tol_rank: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse with the shared rank cutoff."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return np.zeros(M.T.shape)
    factor = settings.TOL_RANK if tol_rank is None else tol_rank
    return np.linalg.pinv(M, rcond=max(M.shape) * factor)


def nullspace_basis(M, tol_rank: float | None = None) -> np.ndarray:
    """
    Orthonormal kernel basis with a deterministic sign: the largest-magnitude
    entry of each column is positive.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    cols = M.shape[1]
    if M.shape[0] == 0 or not np.any(M):
        V = np.eye(cols)
    else:
        factor = settings.TOL_RANK if tol_rank is None else tol_rank
        V = scipy.linalg.null_space(M, rcond=max(M.shape) * factor)
    for j in range(V.shape[1]):
        k = int(np.argmax(np.abs(V[:, j])))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    return V


def build_kf(U_fV_p, Phi, tol_rank: float | None = None) -> np.ndarray:
    """K_f = (U_f V_p)' Phi for a non-singular Phi."""
    U_fV_p = np.atleast_2d(np.asarray(U_fV_p, dtype=float))
    Phi = as_matrix(Phi, "Phi")
    mu = U_fV_p.shape[0]
    if Phi.shape != (mu, mu):
        raise ValueError(f"Phi must be {mu}x{mu}, got {Phi.shape}")
    if numerical_rank(Phi, tol_rank) < mu:
        raise ValueError("Phi must be non-singular")
    return U_fV_p.T @ Phi


def _validated_vp(W_p: np.ndarray, V_p, tol_rank: float | None) -> np.ndarray:
    V_p = np.atleast_2d(np.asarray(V_p, dtype=float))
    if V_p.shape[0] != W_p.shape[1]:
        raise ValueError(f"V_p override must have {W_p.shape[1]} rows, got {V_p.shape[0]}")
    scale = max(1.0, float(np.abs(W_p).max(initial=0.0))) * max(1.0, float(np.abs(V_p).max(initial=0.0)))
    if np.abs(W_p @ V_p).max(initial=0.0) > 1e-9 * scale:
        raise ValueError("V_p override is not in the kernel of W_p")
    nullity = W_p.shape[1] - numerical_rank(W_p, tol_rank)
    if V_p.shape[1] != nullity or numerical_rank(V_p, tol_rank) != nullity:
        raise ValueError(f"V_p override must have full column rank {nullity} (the nullity of W_p)")
    if not np.allclose(V_p.T @ V_p, np.eye(nullity), atol=1e-9):
        logger.info("V_p override is not orthonormal; reduction stays valid, the basis changes Hhat")
    return V_p


def build_reduction_maps(part: HankelPartition, Phi=None, V_p=None, tol_rank: float | None = None) -> ReductionMaps:
    """W_p^+, V_p (default or validated override), K_f and the cached U_f V_p."""
    W_p_pinv = pseudoinverse(part.W_p, tol_rank)
    V_p = nullspace_basis(part.W_p, tol_rank) if V_p is None else _validated_vp(part.W_p, V_p, tol_rank)
    U_fV_p = part.U_f @ V_p
    mu = part.m * part.N_f
    Phi = np.eye(mu) if Phi is None else as_matrix(Phi, "Phi")
    if Phi.size == 1 and mu > 1:
        Phi = Phi.item() * np.eye(mu)
    K_f = build_kf(U_fV_p, Phi, tol_rank)
    rank = numerical_rank(U_fV_p, tol_rank)
    if rank != mu:
        logger.warning(f"rank(U_f V_p) = {rank} differs from m*N_f = {mu}")
    return ReductionMaps(W_p_pinv, V_p, K_f, Phi, U_fV_p, tol_rank)


def eliminate_equalities(raw: DpcRawQP, maps: ReductionMaps) -> ParametricQP:
    """Substitute a = W_p^+ xi + V_p alpha."""
    if maps.V_p.shape[0] != raw.l or maps.W_p_pinv.shape != (raw.l, raw.n_theta):
        raise ValueError("reduction maps do not match the raw DPC problem")
    V_p, W_pinv = maps.V_p, maps.W_p_pinv
    H_hat = clip_psd(V_p.T @ raw.H_tilde @ V_p) if maps.nu else np.zeros((0, 0))
    qp = ParametricQP(
        H=H_hat,
        F=V_p.T @ raw.H_tilde @ W_pinv,
        G=raw.G_tilde @ V_p,
        E=-raw.G_tilde @ W_pinv,
        d=raw.d,
        strictly_convex=False,
        name="alpha",
    )
    qp.strictly_convex = maps.nu > 0 and is_positive_definite(qp.H, maps.tol_rank)
    return qp


def reduce_to_beta(raw: DpcRawQP, maps: ReductionMaps) -> ParametricQP:
    """Substitute alpha = K_f beta; the V_f direction is dropped."""
    alpha = eliminate_equalities(raw, maps)
    K_f = maps.K_f
    H_check = symmetrize(K_f.T @ alpha.H @ K_f)
    if not is_positive_definite(H_check, maps.tol_rank):
        raise DegenerateReductionError(
            f"degenerate reduction: reduced Hessian is not positive definite "
            f"(min eigenvalue {np.linalg.eigvalsh(H_check).min():.3e}); check excitation and horizons"
        )
    qp = ParametricQP(H_check, K_f.T @ alpha.F, alpha.G @ K_f, alpha.E, alpha.d,
                      strictly_convex=True, name="beta")
    zero = qp.zero_rows()
    if zero.size:
        logger.info(f"beta QP rows {zero.tolist()} have a vanishing decision gradient (kept, parameter-only)")
    return qp


def recover_uf(maps: ReductionMaps, U_f, xi, beta) -> np.ndarray:
    """u_f = U_f W_p^+ xi + U_f V_p K_f beta."""
    U_f = np.atleast_2d(np.asarray(U_f, dtype=float))
    return U_f @ maps.W_p_pinv @ as_vector(xi, "xi") + maps.T @ as_vector(beta, "beta")


def recover_a(maps: ReductionMaps, xi, beta) -> np.ndarray:
    """a = W_p^+ xi + V_p K_f beta, one optimizer of the raw DPC problem."""
    return maps.W_p_pinv @ as_vector(xi, "xi") + maps.V_p @ maps.K_f @ as_vector(beta, "beta")


def rank_report(part: HankelPartition, maps: ReductionMaps, m: int, n: int, N_p: int, N_f: int,
                tol_rank: float | None = None) -> RankReport:
    rank_Wp = numerical_rank(part.W_p, tol_rank)
    rank_UfVp = numerical_rank(maps.U_fV_p, tol_rank) if maps.nu else 0
    report = RankReport(
        rank_Wp=rank_Wp,
        nu=part.l - rank_Wp,
        rank_UfVp=rank_UfVp,
        l=part.l,
        expected_rank_Wp=m * N_p + n,
        expected_nu=part.l - (m * N_p + n),
        expected_mu=m * N_f,
    )
    if rank_Wp != report.expected_rank_Wp:
        report.flags.append(f"rank(W_p) = {rank_Wp}, expected m*N_p+n = {report.expected_rank_Wp}")
    if report.nu < m * (N_f + n):
        report.flags.append(f"nu = {report.nu} below m*(N_f+n) = {m * (N_f + n)}")
    if rank_UfVp != report.expected_mu:
        report.flags.append(f"rank(U_f V_p) = {rank_UfVp}, expected m*N_f = {report.expected_mu}")
    for flag in report.flags:
        logger.warning(flag)
    return report


def signal_bounds(M, v) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate interval of {s : M s <= v}; unbounded sides fall back to max|v|."""
    M = as_matrix(M, "M")
    v = as_vector(v, "v")
    dim = M.shape[1]
    fallback = float(np.abs(v).max(initial=1.0))
    lower, upper = np.full(dim, -fallback), np.full(dim, fallback)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        lo, hi = solve_lp(e, M, v), solve_lp(-e, M, v)
        if lo.status == OPTIMAL:
            lower[i] = lo.value
        if hi.status == OPTIMAL:
            upper[i] = -hi.value
        if lo.status != OPTIMAL or hi.status != OPTIMAL:
            logger.warning(f"signal coordinate {i} is unbounded by the constraints, using +-{fallback}")
    return lower, upper
