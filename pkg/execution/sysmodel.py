#!/usr/bin/env python3
"""
Linear time-invariant plant model and the structural matrices built from it.

    x(k+1) = A x(k) + B u(k)
    y(k)   = C x(k) + D u(k)

Signals are stacked over time: u = (u(0); ...; u(N-1)) of length m*N.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

import settings
from linalg_tools import as_matrix, as_vector, numerical_rank

logger = logging.getLogger(__name__)


class UnobservableError(ValueError):
    """Observability matrix at the requested depth is rank deficient."""


@dataclass(frozen=True)
class SystemModel:
    """State-space matrices of a deterministic LTI plant."""
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        n, m, p = self.A.shape[0], self.B.shape[1], self.C.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape != (n, m):
            raise ValueError(f"B must be {n}x{m}, got {self.B.shape}")
        if self.C.shape != (p, n):
            raise ValueError(f"C must be {p}x{n}, got {self.C.shape}")
        if self.D.shape != (p, m):
            raise ValueError(f"D must be {p}x{m}, got {self.D.shape}")
        if min(n, m, p) < 1:
            raise ValueError("n, m and p must be positive")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def to_dict(self) -> dict:
        return {key: getattr(self, key).tolist() for key in ("A", "B", "C", "D")}


@dataclass(frozen=True)
class TrajectorySegment:
    """Stacked input/output sequences of N steps."""
    u: np.ndarray
    y: np.ndarray
    m: int
    p: int

    def __post_init__(self):
        object.__setattr__(self, "u", as_vector(self.u, "u"))
        object.__setattr__(self, "y", as_vector(self.y, "y"))
        if self.u.size % self.m or self.y.size % self.p or self.u.size // self.m != self.y.size // self.p:
            raise ValueError(
                f"stacked lengths {self.u.size}, {self.y.size} do not match m={self.m}, p={self.p}"
            )

    @property
    def N(self) -> int:
        return self.u.size // self.m


def _check_depth(N: int) -> int:
    if int(N) != N or N < 1:
        raise ValueError(f"depth N must be a positive integer, got {N}")
    return int(N)


def _state(model: SystemModel, x0) -> np.ndarray:
    x = as_vector(x0, "x0")
    if x.size != model.n:
        raise ValueError(f"state must have length n={model.n}, got {x.size}")
    return x


def _stacked(model: SystemModel, u) -> np.ndarray:
    u = as_vector(u, "u")
    if u.size % model.m:
        raise ValueError(f"stacked input length {u.size} is not a multiple of m={model.m}")
    return u


def simulate(model: SystemModel, x0, u) -> np.ndarray:
    """Stacked outputs of the plant started in x0 and driven by the stacked input u."""
    x = _state(model, x0)
    U = _stacked(model, u).reshape(-1, model.m)
    Y = np.empty((U.shape[0], model.p))
    for k, uk in enumerate(U):
        Y[k] = model.C @ x + model.D @ uk
        x = model.A @ x + model.B @ uk
    return Y.reshape(-1)


def simulate_states(model: SystemModel, x0, u) -> np.ndarray:
    """States x(0), ..., x(N) along the run, one per row."""
    x = _state(model, x0)
    U = _stacked(model, u).reshape(-1, model.m)
    X = np.empty((U.shape[0] + 1, model.n))
    X[0] = x
    for k, uk in enumerate(U):
        X[k + 1] = model.A @ X[k] + model.B @ uk
    return X


def observability_matrix(model: SystemModel, N: int) -> np.ndarray:
    """Rows C, CA, ..., CA^(N-1) stacked."""
    N = _check_depth(N)
    blocks = [model.C]
    for _ in range(N - 1):
        blocks.append(blocks[-1] @ model.A)
    return np.vstack(blocks)


def toeplitz_matrix(model: SystemModel, N: int) -> np.ndarray:
    """Lower block-triangular impulse-response matrix with D on the diagonal."""
    N = _check_depth(N)
    m, p = model.m, model.p
    markov = [model.D]
    AkB = model.B
    for _ in range(N - 1):
        markov.append(model.C @ AkB)
        AkB = model.A @ AkB
    T = np.zeros((p * N, m * N))
    for i in range(N):
        for j in range(i + 1):
            T[i * p:(i + 1) * p, j * m:(j + 1) * m] = markov[i - j]
    return T


def controllability_matrix(model: SystemModel) -> np.ndarray:
    blocks = [model.B]
    for _ in range(model.n - 1):
        blocks.append(model.A @ blocks[-1])
    return np.hstack(blocks)


def is_controllable(model: SystemModel, tol_rank: float | None = None) -> bool:
    return numerical_rank(controllability_matrix(model), tol_rank) == model.n


def is_observable(model: SystemModel, tol_rank: float | None = None) -> bool:
    return numerical_rank(observability_matrix(model, model.n), tol_rank) == model.n


def observability_index(model: SystemModel, max_depth: int | None = None,
                        tol_rank: float | None = None) -> int:
    """Smallest N for which O_N has full column rank n."""
    max_depth = model.n if max_depth is None else max_depth
    for N in range(1, max_depth + 1):
        if numerical_rank(observability_matrix(model, N), tol_rank) == model.n:
            return N
    raise UnobservableError(f"model is unobservable up to depth {max_depth}")


def _observability_pinv(O: np.ndarray, N_p: int, tol_rank: float | None) -> np.ndarray:
    # (O'O)^-1 O' evaluated through an economic QR of O
    n = O.shape[1]
    if numerical_rank(O, tol_rank) < n:
        raise UnobservableError(f"unobservable at depth N_p={N_p}")
    Q, R = scipy.linalg.qr(O, mode="economic")
    return scipy.linalg.solve_triangular(R, Q.T)


def gamma_matrix(model: SystemModel, N_p: int, tol_rank: float | None = None) -> np.ndarray:
    """Map from a past window xi = (u_p; y_p) of depth N_p to the current state x0."""
    N_p = _check_depth(N_p)
    O = observability_matrix(model, N_p)
    O_pinv = _observability_pinv(O, N_p, tol_rank)
    T = toeplitz_matrix(model, N_p)
    A_Np = np.linalg.matrix_power(model.A, N_p)
    # (A^(N_p-1) B ... A B  B)
    reach = np.hstack([np.linalg.matrix_power(model.A, N_p - 1 - j) @ model.B for j in range(N_p)])
    return np.hstack([reach - A_Np @ O_pinv @ T, A_Np @ O_pinv])


def is_consistent(model: SystemModel, x0, u, y, tol: float = 1e-9) -> bool:
    """True iff y matches the response from x0 to u within tol (infinity norm)."""
    u = _stacked(model, u)
    y = as_vector(y, "y")
    N = u.size // model.m
    if y.size != model.p * N:
        raise ValueError(f"output length {y.size} does not match p*N={model.p * N}")
    if N == 0:
        return True
    residual = y - observability_matrix(model, N) @ _state(model, x0) - toeplitz_matrix(model, N) @ u
    return bool(np.abs(residual).max() <= tol)


def reconstruct_initial_state(model: SystemModel, N_p: int, xi, tol_rank: float | None = None) -> np.ndarray:
    xi = as_vector(xi, "xi")
    expected = (model.m + model.p) * N_p
    if xi.size != expected:
        raise ValueError(f"past window must have length (m+p)*N_p={expected}, got {xi.size}")
    return gamma_matrix(model, N_p, tol_rank) @ xi


def preimage_state(model: SystemModel, x0, steps: int) -> np.ndarray:
    """State x with A^steps x = x0, i.e. the start of a zero-input run ending in x0."""
    x0 = _state(model, x0)
    A_k = np.linalg.matrix_power(model.A, steps)
    if numerical_rank(A_k) < model.n:
        raise ValueError(f"A^{steps} is singular, zero-input preimage of x0 is not unique")
    return np.linalg.solve(A_k, x0)


def random_model(n: int, m: int = 1, p: int = 1, seed: int | None = None,
                 max_tries: int = 100) -> SystemModel:
    """Random controllable and observable plant with spectral radius in [0.5, 1]."""
    rng = np.random.default_rng(settings.SEED if seed is None else seed)
    for attempt in range(max_tries):
        A = rng.normal(size=(n, n))
        radius = np.abs(np.linalg.eigvals(A)).max()
        if radius < 1e-6:
            continue
        A *= rng.uniform(0.5, 1.0) / radius
        model = SystemModel(A, rng.normal(size=(n, m)), rng.normal(size=(p, n)),
                            rng.normal(size=(p, m)))
        ctrb = np.linalg.svd(controllability_matrix(model), compute_uv=False)
        obsv = np.linalg.svd(observability_matrix(model, n), compute_uv=False)
        # reject nearly uncontrollable or unobservable draws
        if ctrb[n - 1] > 1e-3 * ctrb[0] and obsv[n - 1] > 1e-3 * obsv[0]:
            logger.debug(f"random_model accepted after {attempt + 1} draws")
            return model
    raise RuntimeError(f"no well-conditioned plant found in {max_tries} draws")
