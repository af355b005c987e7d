#!/usr/bin/env python3
"""
Recorded input/output data: Hankel matrices, persistency of excitation,
data-length arithmetic and the (W_p; U_f; Y_f) partition.
"""

import logging
from dataclasses import dataclass

import numpy as np

import settings
from linalg_tools import as_matrix, as_vector, numerical_rank
from sysmodel import SystemModel, simulate

logger = logging.getLogger(__name__)


class ExcitationError(RuntimeError):
    """No persistently exciting input found within the retry budget."""


@dataclass(frozen=True)
class DataRecord:
    """Stacked recorded sequences u_d (length m*N_d) and y_d (length p*N_d)."""
    u_d: np.ndarray
    y_d: np.ndarray
    m: int = 1
    p: int = 1

    def __post_init__(self):
        object.__setattr__(self, "u_d", as_vector(self.u_d, "u_d"))
        object.__setattr__(self, "y_d", as_vector(self.y_d, "y_d"))
        if self.m < 1 or self.p < 1:
            raise ValueError("m and p must be positive")
        if self.u_d.size % self.m or self.y_d.size % self.p:
            raise ValueError(f"data lengths {self.u_d.size}, {self.y_d.size} do not match m={self.m}, p={self.p}")
        if self.u_d.size // self.m != self.y_d.size // self.p:
            raise ValueError(
                f"u_d has {self.u_d.size // self.m} samples but y_d has {self.y_d.size // self.p}"
            )
        if self.u_d.size == 0:
            raise ValueError("data record is empty")

    @property
    def N_d(self) -> int:
        return self.u_d.size // self.m

    @classmethod
    def from_blocks(cls, u_blocks, y_blocks) -> "DataRecord":
        """Build from per-step rows (N_d x m and N_d x p)."""
        U = np.array(u_blocks, dtype=float)
        Y = np.array(y_blocks, dtype=float)
        U = U.reshape(len(U), -1)
        Y = Y.reshape(len(Y), -1)
        return cls(U.reshape(-1), Y.reshape(-1), m=U.shape[1], p=Y.shape[1])

    def as_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        return self.u_d.reshape(-1, self.m), self.y_d.reshape(-1, self.p)


@dataclass(frozen=True)
class HorizonSpec:
    """Past window N_p, prediction horizon N_f and assumed state dimension n."""
    N_p: int
    N_f: int
    n: int

    def __post_init__(self):
        for name in ("N_p", "N_f", "n"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value}")

    @property
    def N_e(self) -> int:
        return self.N_p + self.N_f + self.n


@dataclass(frozen=True)
class HankelPartition:
    """Past block W_p (inputs over outputs), future inputs U_f and future outputs Y_f."""
    W_p: np.ndarray
    U_f: np.ndarray
    Y_f: np.ndarray
    m: int
    p: int
    N_p: int
    N_f: int

    def __post_init__(self):
        for name in ("W_p", "U_f", "Y_f"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        l = self.W_p.shape[1]
        if l < 1 or self.U_f.shape[1] != l or self.Y_f.shape[1] != l:
            raise ValueError("W_p, U_f and Y_f must share a positive column count")
        if self.W_p.shape[0] != (self.m + self.p) * self.N_p:
            raise ValueError(f"W_p must have (m+p)*N_p={(self.m + self.p) * self.N_p} rows")
        if self.U_f.shape[0] != self.m * self.N_f or self.Y_f.shape[0] != self.p * self.N_f:
            raise ValueError("U_f / Y_f row counts do not match m*N_f / p*N_f")

    @property
    def l(self) -> int:
        return self.W_p.shape[1]

    @property
    def U_p(self) -> np.ndarray:
        return self.W_p[:self.m * self.N_p]

    @property
    def Y_p(self) -> np.ndarray:
        return self.W_p[self.m * self.N_p:]

    def stacked(self) -> np.ndarray:
        return np.vstack([self.W_p, self.U_f, self.Y_f])


def hankel(seq, depth: int, block_size: int = 1) -> np.ndarray:
    """Block Hankel matrix whose column j holds blocks j..j+depth-1 of seq."""
    blocks = as_vector(seq, "seq")
    if blocks.size % block_size:
        raise ValueError(f"sequence length {blocks.size} is not a multiple of block size {block_size}")
    blocks = blocks.reshape(-1, block_size)
    if int(depth) != depth or depth < 1:
        raise ValueError(f"depth must be a positive integer, got {depth}")
    if depth > len(blocks):
        raise ValueError(f"depth {depth} exceeds sequence length {len(blocks)}")
    windows = np.lib.stride_tricks.sliding_window_view(blocks, depth, axis=0)
    # windows[j, k, i] = blocks[j + i, k]
    return np.ascontiguousarray(windows.transpose(2, 1, 0).reshape(depth * block_size, -1))


def is_persistently_exciting(u_d, order: int, tol_rank: float | None = None, *, m: int = 1) -> bool:
    """Depth-`order` Hankel matrix of u_d has full row rank m*order."""
    u_d = as_vector(u_d, "u_d")
    if order < 1 or u_d.size // m < order:
        return False
    H = hankel(u_d, order, m)
    if H.shape[1] < H.shape[0]:
        return False
    return numerical_rank(H, tol_rank) == m * order


def min_data_length(m: int, N_p: int, N_f: int, n: int) -> int:
    """Shortest record that can be persistently exciting of order N_p+N_f+n."""
    return (m + 1) * (N_p + N_f + n) - 1


def max_excitation_order(m: int, N_d: int) -> int:
    """Largest order N with (m+1)*N - 1 <= N_d."""
    return (N_d + 1) // (m + 1)


def partition(data: DataRecord, horizons: HorizonSpec, tol_rank: float | None = None) -> HankelPartition:
    N_p, N_f = horizons.N_p, horizons.N_f
    if data.N_d < N_p + N_f:
        raise ValueError(f"N_d={data.N_d} is shorter than N_p+N_f={N_p + N_f}")
    if not is_persistently_exciting(data.u_d, horizons.N_e, tol_rank, m=data.m):
        logger.warning(
            f"u_d is not persistently exciting of order N_e={horizons.N_e} "
            f"(N_d={data.N_d}, need at least {min_data_length(data.m, N_p, N_f, horizons.n)})"
        )
    depth = N_p + N_f
    Hu = hankel(data.u_d, depth, data.m)
    Hy = hankel(data.y_d, depth, data.p)
    m, p = data.m, data.p
    part = HankelPartition(
        W_p=np.vstack([Hu[:m * N_p], Hy[:p * N_p]]),
        U_f=Hu[m * N_p:],
        Y_f=Hy[p * N_p:],
        m=m, p=p, N_p=N_p, N_f=N_f,
    )
    logger.debug(f"partition: W_p {part.W_p.shape}, U_f {part.U_f.shape}, Y_f {part.Y_f.shape}, l={part.l}")
    return part


def generate_excitation(model: SystemModel, N_d: int, seed: int | None = None, amplitude: float = 1.0,
                        order: int | None = None, x0=None, max_retries: int | None = None,
                        tol_rank: float | None = None) -> DataRecord:
    """
    Uniform random inputs in [-amplitude, amplitude] and the simulated outputs.

    Redraws until the input is persistently exciting of `order`
    (default: the largest order N_d supports).
    """
    if N_d < 1:
        raise ValueError(f"N_d must be positive, got {N_d}")
    order = max_excitation_order(model.m, N_d) if order is None else order
    max_retries = settings.MAX_RETRIES if max_retries is None else max_retries
    x0 = np.zeros(model.n) if x0 is None else x0
    rng = np.random.default_rng(settings.SEED if seed is None else seed)

    for attempt in range(max_retries):
        u_d = rng.uniform(-amplitude, amplitude, size=model.m * N_d)
        if is_persistently_exciting(u_d, order, tol_rank, m=model.m):
            logger.debug(f"excitation of order {order} reached on draw {attempt + 1}")
            return DataRecord(u_d, simulate(model, x0, u_d), m=model.m, p=model.p)

    raise ExcitationError(
        f"excitation not achieved: no input of length {N_d} is persistently exciting "
        f"of order {order} after {max_retries} draws (amplitude={amplitude})"
    )
