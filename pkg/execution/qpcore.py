#!/usr/bin/env python3
"""
Dense solvers used online and as oracles for the explicit solver.

    solve_qp:  min 1/2 z'Hz + f'z   s.t. Gz <= d   (primal active set, H positive definite)
    solve_lp:  min c'x              s.t. Gx <= d   (scipy HiGHS)
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

import settings
from linalg_tools import as_matrix, as_vector, is_symmetric, numerical_rank

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
DEGENERATE = "degenerate"

# scipy linprog status codes
_LP_STATUS = {0: OPTIMAL, 1: DEGENERATE, 2: INFEASIBLE, 3: UNBOUNDED, 4: DEGENERATE}


@dataclass
class QPSolution:
    z_star: np.ndarray
    lambda_star: np.ndarray
    active_set: tuple = ()
    status: str = OPTIMAL
    iterations: int = 0
    objective: float = np.nan

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class LPResult:
    value: float
    x: np.ndarray | None
    status: str
    fallback: bool = False
    message: str = ""


def _constraints(G, d, n: int) -> tuple[np.ndarray, np.ndarray]:
    if G is None or np.size(G) == 0:
        return np.zeros((0, n)), np.zeros(0)
    G = as_matrix(G, "G")
    d = as_vector(d, "d")
    if G.shape != (d.size, n):
        raise ValueError(f"G must be {d.size}x{n}, got {G.shape}")
    return G, d


def solve_lp(c, G=None, d=None) -> LPResult:
    """Minimize c'x over Gx <= d with free variables."""
    c = as_vector(c, "c")
    n = c.size
    G, d = _constraints(G, d, n)
    kwargs = dict(bounds=[(None, None)] * n)
    if G.shape[0]:
        kwargs.update(A_ub=G, b_ub=d)

    res = linprog(c, method="highs", **kwargs)
    fallback = False
    if res.status in (1, 4):
        # numerical trouble in the default HiGHS path, retry with the other algorithms
        for method in ("highs-ds", "highs-ipm"):
            fallback = True
            logger.debug(f"LP status {res.status} ({res.message}), retrying with {method}")
            res = linprog(c, method=method, **kwargs)
            if res.status not in (1, 4):
                break

    status = _LP_STATUS.get(res.status, DEGENERATE)
    if status != OPTIMAL:
        return LPResult(np.nan, None, status, fallback, res.message)
    return LPResult(float(res.fun), np.asarray(res.x, dtype=float), OPTIMAL, fallback, res.message)


def chebyshev_center(A, b, r_max: float = 1e6) -> tuple[np.ndarray | None, float, str]:
    """Center and radius of the largest ball inside {x : Ax <= b}, radius capped at r_max."""
    A = as_matrix(A, "A")
    b = as_vector(b, "b")
    dim = A.shape[1]
    norms = np.linalg.norm(A, axis=1)
    lhs = np.vstack([
        np.hstack([A, norms[:, None]]),
        np.hstack([np.zeros((1, dim)), [[-1.0]]]),
        np.hstack([np.zeros((1, dim)), [[1.0]]]),
    ])
    rhs = np.concatenate([b, [0.0, r_max]])
    cost = np.zeros(dim + 1)
    cost[-1] = -1.0
    res = solve_lp(cost, lhs, rhs)
    if res.status != OPTIMAL:
        return None, -np.inf, res.status
    return res.x[:dim], float(res.x[-1]), OPTIMAL


def _solve_eqp(H: np.ndarray, g: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Step p and multipliers of min 1/2 p'Hp + g'p s.t. Ap = 0."""
    n, k = H.shape[0], A.shape[0]
    K = np.block([[H, A.T], [A, np.zeros((k, k))]])
    rhs = np.concatenate([-g, np.zeros(k)])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _feasibility_tol(d: np.ndarray, tol: float) -> np.ndarray:
    return tol * (1.0 + np.abs(d))


def solve_qp(H, f, G=None, d=None, *, tol: float | None = None, max_iter: int | None = None) -> QPSolution:
    """
    Primal active-set method with an LP phase-1 start.

    Ties in the blocking-constraint and dropping choices go to the lowest row index,
    so identical inputs always give identical active sets.
    """
    tol = settings.TOL_OPT if tol is None else tol
    H = as_matrix(H, "H")
    f = as_vector(f, "f")
    n = f.size
    if H.shape != (n, n):
        raise ValueError(f"H must be {n}x{n}, got {H.shape}")
    if not is_symmetric(H, 1e-9):
        raise ValueError("H must be symmetric")
    try:
        chol = scipy.linalg.cho_factor(H)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"H must be positive definite: {e}")
    G, d = _constraints(G, d, n)
    q = G.shape[0]
    max_iter = 50 * (n + q) if max_iter is None else max_iter
    feas = _feasibility_tol(d, tol)

    def finish(z, working, lam_w, status=OPTIMAL, iterations=0):
        lam = np.zeros(q)
        if len(working):
            lam[list(working)] = lam_w
        return QPSolution(z, lam, tuple(working), status, iterations, float(0.5 * z @ H @ z + f @ z))

    z = -scipy.linalg.cho_solve(chol, f)
    if q == 0 or np.all(G @ z <= d + feas):
        return finish(z, [], np.zeros(0))

    phase1 = solve_lp(np.zeros(n), G, d)
    if phase1.status == INFEASIBLE:
        return QPSolution(np.full(n, np.nan), np.zeros(q), (), INFEASIBLE)
    if phase1.status != OPTIMAL:
        return QPSolution(np.full(n, np.nan), np.zeros(q), (), DEGENERATE)
    z = phase1.x

    # start from a linearly independent subset of the tight rows
    working: list[int] = []
    for i in np.flatnonzero(np.abs(G @ z - d) <= feas):
        if len(working) < n and numerical_rank(G[working + [int(i)]]) == len(working) + 1:
            working.append(int(i))

    for iteration in range(1, max_iter + 1):
        g = H @ z + f
        p, lam_w = _solve_eqp(H, g, G[working])
        if np.abs(p).max(initial=0.0) <= tol * (1.0 + np.abs(z).max(initial=0.0)):
            if not working or lam_w.min() >= -tol:
                return finish(z, working, lam_w, OPTIMAL, iteration)
            # most negative multiplier leaves, first occurrence is the lowest row index
            working.pop(int(np.argmin(lam_w)))
            continue

        Gp = G @ p
        slack = np.maximum(d - G @ z, 0.0)
        alpha, blocking = 1.0, None
        for i in range(q):
            if i in working or Gp[i] <= tol * np.abs(G[i]).max(initial=1.0) * np.abs(p).max():
                continue
            ratio = slack[i] / Gp[i]
            if ratio < alpha:
                alpha, blocking = ratio, i
        z = z + alpha * p
        if blocking is not None:
            working.append(blocking)
            working.sort()

    logger.warning(f"active-set solver hit the iteration cap ({max_iter}), reporting degenerate")
    return finish(z, working, np.zeros(len(working)), DEGENERATE, max_iter)
