#!/usr/bin/env python3
"""
Explicit solution of strictly convex parametric QPs

    min 1/2 z'Hz + theta'F'z   s.t.  Gz <= E theta + d

as a continuous piecewise-affine law z*(theta) = L_i theta + c_i on critical regions.

Regions are discovered by geometric stepping: start from one region, cross each
facet by a small step and identify the optimal active set on the other side.
Regions are never merged, one region per optimal active set.
"""

import logging
import threading
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

import settings
from condense import ParametricQP
from linalg_tools import as_matrix, as_vector, numerical_rank
from qpcore import OPTIMAL, UNBOUNDED, chebyshev_center, solve_lp, solve_qp

logger = logging.getLogger(__name__)

# facet tags: which inequality produced a region row
DUAL = "dual"
PRIMAL = "primal"
DOMAIN = "domain"


@dataclass
class Polyhedron:
    """{theta : A theta <= b}."""
    A: np.ndarray
    b: np.ndarray
    empty: bool = False

    def __post_init__(self):
        self.b = as_vector(self.b, "b")
        self.A = np.asarray(self.A, dtype=float)
        if self.A.ndim < 2:
            self.A = self.A.reshape(self.b.size, -1)
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has {self.b.size} entries")

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @classmethod
    def box(cls, lower, upper) -> "Polyhedron":
        lower, upper = as_vector(lower, "lower"), as_vector(upper, "upper")
        if lower.size != upper.size or np.any(lower > upper):
            raise ValueError("box bounds must have equal length and lower <= upper")
        eye = np.eye(lower.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    def contains(self, theta, tol: float = settings.TOL_CONTAINS) -> bool:
        if self.empty:
            return False
        theta = as_vector(theta, "theta")
        return bool(np.all(self.A @ theta <= self.b + tol))

    def intersect(self, other: "Polyhedron") -> "Polyhedron":
        return Polyhedron(np.vstack([self.A, other.A]), np.concatenate([self.b, other.b]),
                          self.empty or other.empty)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "b": self.b.tolist()}


@dataclass
class CriticalRegion:
    """Affine law z = L theta + c and multipliers lambda_A = lambda_gain theta + lambda_offset on a region."""
    active_set: tuple
    L: np.ndarray
    c: np.ndarray
    region: Polyhedron
    lambda_gain: np.ndarray
    lambda_offset: np.ndarray
    facets: list = field(default_factory=list, repr=False)
    center: np.ndarray | None = field(default=None, repr=False)
    radius: float = 0.0

    def law(self, theta) -> np.ndarray:
        return self.L @ as_vector(theta, "theta") + self.c

    def multipliers(self, theta, n_constraints: int) -> np.ndarray:
        lam = np.zeros(n_constraints)
        if self.active_set:
            lam[list(self.active_set)] = self.lambda_gain @ as_vector(theta, "theta") + self.lambda_offset
        return lam

    def contains(self, theta, tol: float = settings.TOL_CONTAINS) -> bool:
        return self.region.contains(theta, tol)


@dataclass
class ExplicitSolution:
    regions: list
    n_theta: int
    n_z: int
    domain: Polyhedron
    n_constraints: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def s(self) -> int:
        return len(self.regions)


@dataclass
class PointLocation:
    z: np.ndarray | None
    region_id: int
    found: bool


def _normalized(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norms = np.linalg.norm(A, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return A / safe[:, None], b / safe, norms


def is_empty(poly: Polyhedron, tol: float = settings.TOL_CONTAINS) -> bool:
    """Phase-1 feasibility of A theta <= b + tol."""
    if poly.empty:
        return True
    if poly.A.shape[0] == 0:
        return False
    res = solve_lp(np.zeros(poly.dim), poly.A, poly.b + tol)
    return res.status not in (OPTIMAL, UNBOUNDED)


def has_interior(poly: Polyhedron, tol: float = settings.TOL_REGION_RADIUS) -> bool:
    if poly.empty:
        return False
    if poly.A.shape[0] == 0:
        return True
    _, radius, status = chebyshev_center(poly.A, poly.b)
    return status == OPTIMAL and radius > tol


def nonredundant_rows(poly: Polyhedron, tol: float = settings.TOL_CONTAINS) -> list[int] | None:
    """Indices of a minimal set of rows describing poly, None when poly is empty."""
    if is_empty(poly, tol):
        return None
    A, b, norms = _normalized(poly.A, poly.b)
    candidates = []
    for i in range(A.shape[0]):
        if norms[i] <= 1e-12 * max(1.0, norms.max()):
            if poly.b[i] < -tol:
                return None
            continue
        duplicate = next((j for j in candidates if np.allclose(A[i], A[j], atol=1e-12)), None)
        if duplicate is None:
            candidates.append(i)
        elif b[i] < b[duplicate]:
            candidates[candidates.index(duplicate)] = i

    kept = list(candidates)
    for i in candidates:
        others = [j for j in kept if j != i]
        # maximize a_i theta over the other rows with row i relaxed by one unit
        lhs = np.vstack([A[others], A[i:i + 1]])
        rhs = np.concatenate([b[others], [b[i] + 1.0]])
        res = solve_lp(-A[i], lhs, rhs)
        if res.status == OPTIMAL and -res.value <= b[i] + tol:
            kept.remove(i)
    return sorted(kept)


def remove_redundant(poly: Polyhedron, tol: float = settings.TOL_CONTAINS) -> Polyhedron:
    """Minimal H-representation (rows normalized); empty input comes back flagged."""
    kept = nonredundant_rows(poly, tol)
    if kept is None:
        return Polyhedron(np.zeros((0, poly.dim)), np.zeros(0), empty=True)
    A, b, _ = _normalized(poly.A[kept], poly.b[kept])
    return Polyhedron(A, b)


def bounding_box(poly: Polyhedron) -> tuple[np.ndarray, np.ndarray]:
    lower, upper = np.full(poly.dim, -np.inf), np.full(poly.dim, np.inf)
    for i in range(poly.dim):
        e = np.zeros(poly.dim)
        e[i] = 1.0
        lo, hi = solve_lp(e, poly.A, poly.b), solve_lp(-e, poly.A, poly.b)
        if lo.status == OPTIMAL:
            lower[i] = lo.value
        if hi.status == OPTIMAL:
            upper[i] = -hi.value
    return lower, upper


def feasible_parameter_box(qp: ParametricQP, margin: float = 0.01, cap: float = 1e3) -> Polyhedron:
    """Bounding box of {theta : exists z, Gz <= E theta + d}, enlarged by a relative margin."""
    n_theta, n_z = qp.n_theta, qp.n_z
    lhs = np.hstack([-qp.E, qp.G])
    lower, upper = np.full(n_theta, -cap), np.full(n_theta, cap)
    for i in range(n_theta):
        e = np.zeros(n_theta + n_z)
        e[i] = 1.0
        lo, hi = solve_lp(e, lhs, qp.d), solve_lp(-e, lhs, qp.d)
        if lo.status == OPTIMAL:
            lower[i] = lo.value
        if hi.status == OPTIMAL:
            upper[i] = -hi.value
        if lo.status != OPTIMAL or hi.status != OPTIMAL:
            logger.warning(f"feasible parameter set is unbounded in coordinate {i}, clipping at +-{cap}")
    width = np.maximum(upper - lower, 1e-9)
    return Polyhedron.box(lower - margin * width, upper + margin * width)


def sample_parameters(poly: Polyhedron, n: int, seed: int | None = None, max_draws: int | None = None) -> np.ndarray:
    """n points uniformly distributed in poly (rejection sampling from its bounding box)."""
    rng = np.random.default_rng(settings.SEED if seed is None else seed)
    if n <= 0:
        return np.zeros((0, poly.dim))
    lower, upper = bounding_box(poly)
    if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
        raise ValueError("cannot sample from an unbounded polyhedron")
    max_draws = 1000 * n if max_draws is None else max_draws
    points, draws = [], 0
    while len(points) < n and draws < max_draws:
        batch = rng.uniform(lower, upper, size=(n, poly.dim))
        draws += n
        inside = np.all(batch @ poly.A.T <= poly.b + settings.TOL_CONTAINS, axis=1)
        points.extend(batch[inside])
    if len(points) < n:
        raise RuntimeError(f"only {len(points)} of {n} samples fell inside the polyhedron")
    return np.array(points[:n])


class _RegionExplorer:
    """Facet-stepping enumeration of the critical regions of one QP over one domain."""

    def __init__(self, qp: ParametricQP, domain: Polyhedron, step: float, max_workers: int,
                 tol: float):
        self.qp = qp
        self.step = step
        self.max_workers = max_workers
        self.tol = tol
        self.chol = scipy.linalg.cho_factor(qp.H)
        self.HiF = scipy.linalg.cho_solve(self.chol, qp.F)

        # rows without decision gradient only restrict the parameter
        zero = qp.zero_rows()
        self.param_rows = [int(i) for i in zero]
        self.rows = [i for i in range(qp.n_constraints) if i not in set(self.param_rows)]
        A = domain.A
        b = domain.b
        if self.param_rows:
            A = np.vstack([A, -qp.E[self.param_rows]])
            b = np.concatenate([b, qp.d[self.param_rows]])
        self.domain = Polyhedron(A, b)

        self._lock = threading.Lock()
        # active set -> its CriticalRegion, False (rejected) or None (being built)
        self.known: dict = {}
        self.stats = {
            "licq_skips": 0, "jitter_attempts": 0, "unresolved_facets": 0,
            "infeasible_crossings": 0, "param_rows": list(self.param_rows), "candidates": 0,
        }

    def _count(self, key: str, amount: int = 1):
        with self._lock:
            self.stats[key] += amount

    def _claim(self, active: tuple) -> tuple[bool, object]:
        """(build, outcome): build is True for the first caller; outcome is the recorded result otherwise."""
        with self._lock:
            if active in self.known:
                return False, self.known[active]
            self.known[active] = None
            return True, None

    def _record(self, active: tuple, region: "CriticalRegion | None"):
        with self._lock:
            self.known[active] = region if region is not None else False

    def build_region(self, active: tuple) -> CriticalRegion | None:
        qp = self.qp
        self._count("candidates")
        A_idx = list(active)
        G_A = qp.G[A_idx]
        if A_idx and numerical_rank(G_A) < len(A_idx):
            self._count("licq_skips")
            logger.debug(f"active set {active} violates LICQ, skipped")
            return None

        if A_idx:
            HiGt = scipy.linalg.cho_solve(self.chol, G_A.T)
            S = G_A @ HiGt
            lam_gain = -np.linalg.solve(S, qp.E[A_idx] + G_A @ self.HiF)
            lam_offset = -np.linalg.solve(S, qp.d[A_idx])
            L = -(self.HiF + HiGt @ lam_gain)
            c = -HiGt @ lam_offset
        else:
            lam_gain = np.zeros((0, qp.n_theta))
            lam_offset = np.zeros(0)
            L = -self.HiF
            c = np.zeros(qp.n_z)

        inactive = [i for i in self.rows if i not in active]
        A_rows = [-lam_gain, qp.G[inactive] @ L - qp.E[inactive], self.domain.A]
        b_rows = [lam_offset, qp.d[inactive] - qp.G[inactive] @ c, self.domain.b]
        tags = ([(DUAL, i) for i in A_idx] + [(PRIMAL, i) for i in inactive]
                + [(DOMAIN, k) for k in range(self.domain.A.shape[0])])
        poly = Polyhedron(np.vstack(A_rows), np.concatenate(b_rows))

        kept = nonredundant_rows(poly, self.tol)
        if kept is None:
            return None
        A, b, _ = _normalized(poly.A[kept], poly.b[kept])
        region = Polyhedron(A, b)
        center, radius, status = chebyshev_center(A, b)
        if status != OPTIMAL or radius <= settings.TOL_REGION_RADIUS:
            return None
        return CriticalRegion(
            active_set=tuple(active), L=L, c=c, region=region,
            lambda_gain=lam_gain, lambda_offset=lam_offset,
            facets=[tags[k] for k in kept], center=center, radius=radius,
        )

    def candidates_at(self, theta: np.ndarray, guess: tuple | None = None) -> list[tuple]:
        """Active-set guesses at theta: the combinatorial neighbour first, then numeric ones."""
        out = [] if guess is None else [guess]
        sol = solve_qp(self.qp.H, self.qp.linear_term(theta), self.qp.G[self.rows],
                       self.qp.bound(theta)[self.rows], tol=self.tol)
        if not sol.optimal:
            return out
        working = tuple(self.rows[k] for k in sol.active_set)
        lam = sol.lambda_star
        strong = tuple(self.rows[k] for k in sol.active_set if lam[k] > self.tol)
        for cand in (working, strong):
            if cand not in out:
                out.append(cand)
        return out

    def feasible_at(self, theta: np.ndarray) -> bool:
        res = solve_lp(np.zeros(self.qp.n_z), self.qp.G[self.rows], self.qp.bound(theta)[self.rows])
        return res.status in (OPTIMAL, UNBOUNDED)

    def locate(self, theta: np.ndarray, guess: tuple | None = None) -> tuple[list, bool]:
        """New regions whose active set fits at theta; second value tells whether theta was resolved."""
        found = []
        candidates = self.candidates_at(theta, guess)
        if not candidates:
            return found, False
        for active in candidates:
            build, outcome = self._claim(active)
            if not build:
                if outcome is None:
                    # being built by another worker
                    return found, True
                if outcome is not False and outcome.contains(theta, 10 * self.step):
                    return found, True
                continue
            region = self.build_region(active)
            self._record(active, region)
            if region is None:
                continue
            found.append(region)
            if region.contains(theta, 10 * self.step):
                return found, True
        return found, False

    def facet_point(self, region: CriticalRegion, k: int) -> tuple[np.ndarray, float] | None:
        """Chebyshev center of facet k inside the region's other rows."""
        A, b = region.region.A, region.region.b
        a = A[k]
        others = [j for j in range(A.shape[0]) if j != k]
        proj = A[others] - np.outer(A[others] @ a, a)
        lhs = np.vstack([
            np.hstack([A[others], np.linalg.norm(proj, axis=1)[:, None]]),
            np.hstack([a[None, :], [[0.0]]]),
            np.hstack([-a[None, :], [[0.0]]]),
            np.hstack([np.zeros((1, A.shape[1])), [[-1.0]]]),
            np.hstack([np.zeros((1, A.shape[1])), [[1.0]]]),
        ])
        rhs = np.concatenate([b[others], [b[k], -b[k], 0.0, 1e3]])
        cost = np.zeros(A.shape[1] + 1)
        cost[-1] = -1.0
        res = solve_lp(cost, lhs, rhs)
        if res.status != OPTIMAL:
            return None
        return res.x[:-1], float(res.x[-1])

    def cross_facet(self, job: tuple) -> list:
        region, k = job
        kind, row = region.facets[k]
        if kind == DOMAIN:
            return []
        facet = self.facet_point(region, k)
        if facet is None:
            return []
        point, radius = facet
        normal = region.region.A[k]
        if kind == DUAL:
            guess = tuple(i for i in region.active_set if i != row)
        else:
            guess = tuple(sorted(region.active_set + (row,)))

        theta = point + self.step * normal
        if not self.domain.contains(theta):
            return []
        found, resolved = self.locate(theta, guess)
        if resolved:
            return found
        if not self.feasible_at(theta):
            # the facet lies on the boundary of the feasible parameter set
            self._count("infeasible_crossings")
            return found

        # re-sample the facet with deterministic jitter before giving up
        rng = np.random.default_rng(zlib.crc32(repr((region.active_set, k)).encode()))
        for _ in range(3):
            self._count("jitter_attempts")
            offset = rng.normal(size=point.size)
            offset -= (offset @ normal) * normal
            norm = np.linalg.norm(offset)
            if norm > 0:
                offset *= 0.5 * min(radius, 1.0) / norm
            theta = point + offset + self.step * normal
            if not self.domain.contains(theta):
                continue
            more, resolved = self.locate(theta)
            found.extend(more)
            if resolved:
                return found
        self._count("unresolved_facets")
        logger.warning(f"facet {k} of region {region.active_set} could not be crossed")
        return found

    def seed(self) -> list:
        center, radius, status = chebyshev_center(self.domain.A, self.domain.b)
        if status != OPTIMAL or radius <= 0:
            return []
        sol = solve_qp(self.qp.H, self.qp.linear_term(center), self.qp.G[self.rows],
                       self.qp.bound(center)[self.rows], tol=self.tol)
        if not sol.optimal:
            center = self._feasible_interior_point()
            if center is None:
                return []
        found, _ = self.locate(center)
        rng = np.random.default_rng(settings.SEED)
        for _ in range(3):
            if found:
                break
            self._count("jitter_attempts")
            theta = center + rng.normal(size=center.size) * 0.1 * max(radius, 1e-6)
            if self.domain.contains(theta):
                found, _ = self.locate(theta)
        return found

    def _feasible_interior_point(self) -> np.ndarray | None:
        """theta deep inside both the domain and the feasible parameter set."""
        qp = self.qp
        n_theta, n_z = qp.n_theta, qp.n_z
        G, E, d = qp.G[self.rows], qp.E[self.rows], qp.d[self.rows]
        norms = np.linalg.norm(np.hstack([G, -E]), axis=1)
        dA, db = self.domain.A, self.domain.b
        lhs = np.vstack([
            np.hstack([-E, G, norms[:, None]]),
            np.hstack([dA, np.zeros((dA.shape[0], n_z)), np.linalg.norm(dA, axis=1)[:, None]]),
            np.hstack([np.zeros((1, n_theta + n_z)), [[1.0]]]),
        ])
        rhs = np.concatenate([d, db, [1.0]])
        cost = np.zeros(n_theta + n_z + 1)
        cost[-1] = -1.0
        res = solve_lp(cost, lhs, rhs)
        if res.status != OPTIMAL or res.x[-1] <= 0:
            return None
        return res.x[:n_theta]

    def run(self) -> list:
        regions = {}
        queue = deque(self.seed())
        for region in queue:
            regions[region.active_set] = region
        with ThreadPoolExecutor(max_workers=max(1, self.max_workers)) as pool:
            while queue:
                batch = list(queue)
                queue.clear()
                jobs = [(region, k) for region in batch for k in range(len(region.facets))]
                for found in pool.map(self.cross_facet, jobs):
                    for region in found:
                        if region.active_set not in regions:
                            regions[region.active_set] = region
                            queue.append(region)
                            logger.debug(f"region {region.active_set}: radius {region.radius:.3e}")
        return [regions[key] for key in sorted(regions)]


def explicit_solve(qp: ParametricQP, domain: Polyhedron, *, step: float | None = None,
                   max_workers: int | None = None, tol: float | None = None) -> ExplicitSolution:
    """Enumerate every full-dimensional critical region of qp that meets the domain."""
    if not qp.strictly_convex:
        raise ValueError(f"{qp.name}: explicit solution requires a strictly convex QP")
    if domain.dim != qp.n_theta:
        raise ValueError(f"domain has dimension {domain.dim}, QP parameter has {qp.n_theta}")
    explorer = _RegionExplorer(
        qp, domain,
        step=settings.FACET_STEP if step is None else step,
        max_workers=settings.MAX_WORKERS if max_workers is None else max_workers,
        tol=settings.TOL_OPT if tol is None else tol,
    )
    regions = explorer.run()
    if not regions:
        logger.warning(f"{qp.name}: no critical region found inside the domain")
    if explorer.param_rows:
        logger.info(f"{qp.name}: rows {explorer.param_rows} only restrict the parameter, moved into the domain")
    if explorer.stats["licq_skips"] or explorer.stats["unresolved_facets"]:
        logger.warning(
            f"{qp.name}: degeneracy report: {explorer.stats['licq_skips']} LICQ skips, "
            f"{explorer.stats['unresolved_facets']} unresolved facets"
        )
    logger.info(f"{qp.name}: explicit solution with s = {len(regions)} regions")
    return ExplicitSolution(
        regions=regions, n_theta=qp.n_theta, n_z=qp.n_z, domain=explorer.domain,
        n_constraints=qp.n_constraints, stats=dict(explorer.stats),
    )


def evaluate(sol: ExplicitSolution, theta, tol: float = settings.TOL_CONTAINS) -> PointLocation:
    """Sequential scan; the first region containing theta wins."""
    theta = as_vector(theta, "theta")
    if theta.size != sol.n_theta:
        raise ValueError(f"parameter must have length {sol.n_theta}, got {theta.size}")
    for region_id, region in enumerate(sol.regions):
        if region.contains(theta, tol):
            return PointLocation(region.law(theta), region_id, True)
    return PointLocation(None, -1, False)
