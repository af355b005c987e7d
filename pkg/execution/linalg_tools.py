"""
Small numerical linear algebra helpers shared by every module.

Rank decisions follow one convention: singular values above
max(rows, cols) * sigma_max * tol_rank count.
"""

import numpy as np

import settings


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce scalars, vectors and nested lists into a 2-d float array."""
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    return arr


def as_vector(value, name: str = "vector") -> np.ndarray:
    """Coerce scalars and nested lists into a flat float array."""
    arr = np.array(value, dtype=float)
    if arr.ndim > 1 and max(arr.shape) != arr.size:
        raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
    return arr.reshape(-1)


def rank_threshold(singular_values: np.ndarray, shape: tuple, tol_rank: float | None = None) -> float:
    factor = settings.TOL_RANK if tol_rank is None else tol_rank
    if singular_values.size == 0:
        return 0.0
    return max(shape) * float(singular_values.max()) * factor


def numerical_rank(M, tol_rank: float | None = None) -> int:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s.max() == 0.0:
        return 0
    return int(np.sum(s > rank_threshold(s, M.shape, tol_rank)))


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def is_symmetric(M: np.ndarray, tol: float = 1e-12) -> bool:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return False
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    return bool(np.abs(M - M.T).max(initial=0.0) <= tol * scale)


def min_eigenvalue(M: np.ndarray) -> float:
    if M.size == 0:
        return np.inf
    return float(np.linalg.eigvalsh(symmetrize(M)).min())


def is_positive_semidefinite(M: np.ndarray, tol: float = 1e-10) -> bool:
    """Smallest eigenvalue above -tol (scaled by the largest magnitude)."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return True
    scale = max(1.0, float(np.abs(M).max()))
    return min_eigenvalue(M) > -tol * scale


def is_positive_definite(M: np.ndarray, tol_rank: float | None = None) -> bool:
    """Smallest eigenvalue above the rank threshold of the spectrum."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return True
    eig = np.linalg.eigvalsh(symmetrize(M))
    if eig.max() <= 0.0:
        return False
    return bool(eig.min() > rank_threshold(np.abs(eig), M.shape, tol_rank))


def clip_psd(M: np.ndarray) -> np.ndarray:
    """Symmetric clipping of tiny negative eigenvalues (round-off) to zero."""
    w, V = np.linalg.eigh(symmetrize(M))
    return symmetrize((V * np.clip(w, 0.0, None)) @ V.T)
