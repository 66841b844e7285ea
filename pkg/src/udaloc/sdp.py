"""Semidefinite relaxation: assembly, solver backends, extraction and certificate.

The relaxation is solved in its dual form

    max  b^T y   s.t.   Q - sum_i y_i A_i  >= 0,

and the primal Gram matrix ``Z`` is read back as the multiplier of the
semidefinite cone. Any interior-point backend that accepts a sparse
semidefinite cone can be plugged into :data:`BACKENDS`.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .constraints import ConstraintMatrix, all_constraints, independent_subset
from .geometry import Pose2, Rotation2, Trajectory
from .lifting import ColumnIndexMap, SymmetricMatrix, assemble_cost, pose_cols
from .local_solver import gauss_newton
from .problem import AssociationAssignment, ProblemInstance, evaluate_cost

log = logging.getLogger(__name__)

TIGHTNESS_THRESHOLD = 1e6


class ExtractionError(RuntimeError):
    pass


class SolverUnavailable(RuntimeError):
    pass


@dataclass
class SolverOptions:
    backend: str = "clarabel"
    tol_gap_abs: float = 1e-10
    tol_gap_rel: float = 1e-10
    tol_feas: float = 1e-10
    max_iter: int = 200
    time_limit: float = math.inf
    verbose: bool = False
    backend_settings: Dict[str, object] = field(default_factory=dict)


@dataclass
class SdpProblem:
    cmap: ColumnIndexMap
    cost: SymmetricMatrix
    constraints: List[ConstraintMatrix]
    options: SolverOptions = field(default_factory=SolverOptions)

    @property
    def dimension(self) -> int:
        return self.cmap.n_x

    @property
    def rhs(self) -> np.ndarray:
        return np.array([c.rhs for c in self.constraints])

    def export(self, fh) -> None:
        """Plain-text dump: header, cost triplets, then one block per constraint."""
        fh.write(f"# udaloc-sdp n={self.dimension} m={len(self.constraints)}\n")
        fh.write("columns " + " ".join(self.cmap.names) + "\n")
        fh.write("cost\n")
        self.cost.dump(fh)
        for k, c in enumerate(self.constraints):
            fh.write(f"constraint {k} family={c.family} rhs={c.rhs!r}\n")
            c.A.dump(fh)


@dataclass
class SdpSolution:
    Z: np.ndarray
    primal_objective: float
    dual_objective: float
    status: str
    solve_time: float
    iterations: int = 0
    eigenvalues: np.ndarray = field(default=None)

    def __post_init__(self):
        self.Z = 0.5 * (self.Z + self.Z.T)
        if self.eigenvalues is None:
            self.eigenvalues = np.linalg.eigvalsh(self.Z)[::-1]

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "near-optimal")

    @property
    def gap(self) -> float:
        return abs(self.primal_objective - self.dual_objective) / max(1.0, abs(self.primal_objective))


@dataclass
class Certificate:
    eig_ratio: float
    tight: bool
    so2_feasible: bool
    threshold: float


@dataclass
class ExtractedSolution:
    trajectory: Trajectory
    associations: AssociationAssignment
    theta_raw: np.ndarray
    certificate: Certificate
    rounded: bool
    refined: bool = False


def build_sdp(instance: ProblemInstance, options: Optional[SolverOptions] = None,
              scope: str = "neighbors", prune: bool = True) -> Tuple[SdpProblem, ColumnIndexMap]:
    cmap = ColumnIndexMap(instance, scope)
    Q = assemble_cost(instance, cmap)
    cons = all_constraints(cmap)
    if prune:
        cons = independent_subset(cons)
    return SdpProblem(cmap, Q, cons, options or SolverOptions()), cmap


# ---------------------------------------------------------------------------
# backends


def _svec_index(n: int) -> np.ndarray:
    """``idx[i, j]`` (i <= j) -> position in the column-major upper-triangular svec."""
    idx = -np.ones((n, n), dtype=np.int64)
    k = 0
    for j in range(n):
        for i in range(j + 1):
            idx[i, j] = k
            k += 1
    return idx


def _svec_matrix(A: SymmetricMatrix, idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r, c, v = A.coo()
    pos = idx[r, c]
    return pos, np.where(r == c, v, math.sqrt(2.0) * v)


def _smat(z: np.ndarray, n: int, idx: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(n)
    vals = z[idx[iu]]
    M = np.zeros((n, n))
    M[iu] = vals
    off = M - np.diag(np.diag(M))
    return np.diag(np.diag(M)) + (off + off.T) / math.sqrt(2.0)


def _solve_clarabel(problem: SdpProblem) -> SdpSolution:
    try:
        import clarabel
    except ImportError as e:  # pragma: no cover - environment dependent
        raise SolverUnavailable("clarabel is not installed") from e
    n = problem.dimension
    idx = _svec_index(n)
    d = n * (n + 1) // 2
    rows, cols, vals = [], [], []
    for k, con in enumerate(problem.constraints):
        p, v = _svec_matrix(con.A, idx)
        rows.append(p)
        cols.append(np.full(len(p), k))
        vals.append(v)
    m = len(problem.constraints)
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(d, m))
    qp, qv = _svec_matrix(problem.cost, idx)
    h = np.zeros(d)
    np.add.at(h, qp, qv)
    P = sp.csc_matrix((m, m))
    q = -problem.rhs

    opts = problem.options
    s = clarabel.DefaultSettings()
    s.verbose = opts.verbose
    s.tol_gap_abs = opts.tol_gap_abs
    s.tol_gap_rel = opts.tol_gap_rel
    s.tol_feas = opts.tol_feas
    s.max_iter = opts.max_iter
    if math.isfinite(opts.time_limit):
        s.time_limit = opts.time_limit
    s.presolve_enable = False
    s.chordal_decomposition_enable = False
    # the objective carries weights up to ~1e4; a small static regularization and
    # extra refinement keep the objective accurate to ~1e-9; shorter steps keep
    # the iterates further from the cone boundary near convergence
    s.static_regularization_constant = 1e-11
    s.max_step_fraction = 0.9
    s.iterative_refinement_reltol = 1e-14
    s.iterative_refinement_abstol = 1e-14
    s.iterative_refinement_max_iter = 30
    for key, value in opts.backend_settings.items():
        setattr(s, key, value)

    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, q, A, h, [clarabel.PSDTriangleConeT(n)], s)
    sol = solver.solve()
    elapsed = time.perf_counter() - t0
    status = {
        "Solved": "optimal",
        "AlmostSolved": "near-optimal",
        "PrimalInfeasible": "infeasible",
        "DualInfeasible": "infeasible",
        "AlmostPrimalInfeasible": "infeasible",
        "AlmostDualInfeasible": "infeasible",
        "MaxTime": "timeout",
        "MaxIterations": "max-iterations",
    }.get(str(sol.status), "failed")
    Z = _smat(np.asarray(sol.z), n, idx)
    y = np.asarray(sol.x)
    return SdpSolution(Z, problem.cost.inner(Z), float(problem.rhs @ y), status, elapsed,
                       int(sol.iterations))


def _solve_cvxopt(problem: SdpProblem) -> SdpSolution:
    try:
        import cvxopt
        from cvxopt import solvers
    except ImportError as e:  # pragma: no cover - environment dependent
        raise SolverUnavailable("cvxopt is not installed") from e
    n = problem.dimension
    m = len(problem.constraints)
    rows, cols, vals = [], [], []
    for k, con in enumerate(problem.constraints):
        r, c, v = con.A.coo()
        # full column-major vec, both triangles
        off = r != c
        rr = np.concatenate([r + n * c, c[off] + n * r[off]])
        rows.append(rr)
        cols.append(np.full(len(rr), k))
        vals.append(np.concatenate([v, v[off]]))
    rows = np.concatenate(rows).astype(float)
    cols = np.concatenate(cols).astype(float)
    G = cvxopt.spmatrix(np.concatenate(vals).tolist(), rows.astype(int).tolist(),
                        cols.astype(int).tolist(), (n * n, m))
    h = cvxopt.matrix(problem.cost.to_dense())
    c = cvxopt.matrix(-problem.rhs)
    opts = problem.options
    options = {"show_progress": opts.verbose, "abstol": opts.tol_gap_abs,
               "reltol": opts.tol_gap_rel, "feastol": opts.tol_feas, "maxiters": opts.max_iter}
    t0 = time.perf_counter()
    res = solvers.sdp(c, Gs=[G], hs=[h], options=options)
    elapsed = time.perf_counter() - t0
    status = {"optimal": "optimal", "unknown": "near-optimal"}.get(res["status"], "failed")
    if res["zs"][0] is None:
        raise RuntimeError("cvxopt returned no dual matrix")
    Z = np.array(res["zs"][0])
    y = np.array(res["x"]).ravel()
    return SdpSolution(Z, problem.cost.inner(Z), float(problem.rhs @ y), status, elapsed,
                       int(res.get("iterations", 0)))


BACKENDS: Dict[str, Callable[[SdpProblem], SdpSolution]] = {
    "clarabel": _solve_clarabel,
    "cvxopt": _solve_cvxopt,
}


def solve_sdp(problem: SdpProblem) -> SdpSolution:
    try:
        backend = BACKENDS[problem.options.backend]
    except KeyError:
        raise ValueError(f"unknown SDP backend {problem.options.backend!r}") from None
    sol = backend(problem)
    log.debug("sdp n=%d m=%d status=%s obj=%.9g time=%.2fs", problem.dimension,
              len(problem.constraints), sol.status, sol.primal_objective, sol.solve_time)
    return sol


# ---------------------------------------------------------------------------
# extraction


def eigenvalue_ratio(eigs: np.ndarray, floor: float = 1e-12) -> float:
    """``lambda_2 / lambda_3`` of a descending spectrum; ``inf`` once ``lambda_3``
    is below ``floor * lambda_1``."""
    eigs = np.sort(np.asarray(eigs))[::-1]
    if len(eigs) < 3:
        return math.inf
    lam1, lam2, lam3 = eigs[0], eigs[1], eigs[2]
    if lam3 <= floor * max(lam1, 0.0):
        return math.inf
    return float(lam2 / lam3)


def _x_from_gram(Z: np.ndarray, tight: bool) -> Tuple[np.ndarray, bool]:
    if tight:
        X = Z[:2, :].copy()
        H = X[:, :2]
    else:
        w, V = np.linalg.eigh(Z)
        top = np.argsort(w)[::-1][:2]
        X = (V[:, top] * np.sqrt(np.maximum(w[top], 0.0))).T
        H = X[:, :2]
        # express in the frame where H is orthogonal and closest to identity
        u, _, vt = np.linalg.svd(H)
        X = (u @ vt).T @ X
        H = X[:, :2]
    if np.linalg.norm(H) < 0.5:
        raise ExtractionError("degenerate homogenization block")
    if H[0, 0] < 0:
        X = -X
    return X, not tight


def extract(solution: SdpSolution, cmap: ColumnIndexMap,
            threshold: float = TIGHTNESS_THRESHOLD) -> ExtractedSolution:
    if not solution.ok:
        raise ExtractionError(f"cannot extract from a solve with status {solution.status!r}")
    ratio = eigenvalue_ratio(solution.eigenvalues)
    tight = ratio >= threshold
    X, rounded = _x_from_gram(solution.Z, tight)
    col = lambda name: X[:, cmap[name]]

    traj: Trajectory = []
    proper = True
    for i in range(cmap.n_poses):
        c1, c2, r = pose_cols(i)
        M = np.column_stack([col(c1), col(c2)])
        u, _, vt = np.linalg.svd(M)
        Rm = u @ vt
        if np.linalg.det(Rm) <= 0:
            proper = False
        traj.append(Pose2(Rotation2(Rm[0, 0], Rm[1, 0]), col(r)))

    theta_raw = np.array([0.5 * (col(a)[0] + col(b)[1])
                          for a, b in (cmap.theta_cols(t) for t in range(cmap.n_theta))])
    assoc = {}
    for mi, grp in enumerate(cmap.groups):
        best = max(grp, key=lambda t: (theta_raw[t], -cmap.theta_landmark[t]))
        assoc[cmap.meas_keys[mi]] = cmap.theta_landmark[best]
    cert = Certificate(ratio, tight, proper, threshold)
    return ExtractedSolution(traj, AssociationAssignment(assoc), theta_raw, cert, rounded)


@dataclass
class SdpResult:
    problem: SdpProblem
    solution: SdpSolution
    extracted: Optional[ExtractedSolution]
    build_time: float


def refine(instance: ProblemInstance, ex: ExtractedSolution) -> ExtractedSolution:
    """Polish a tight extraction with Gauss-Newton at its fixed associations.

    The interior-point iterate is only accurate to roughly the square root of
    the solver tolerance in the trajectory; a few Newton steps on the certified
    association branch recover full precision. Only an improvement is kept.
    """
    if not ex.certificate.tight or ex.rounded:
        return ex
    start = evaluate_cost(instance, ex.trajectory, ex.associations)
    res = gauss_newton(instance, ex.trajectory, assignment=ex.associations)
    if not res.cost <= start:
        return ex
    return replace(ex, trajectory=res.trajectory, refined=True)


def solve_instance(instance: ProblemInstance, options: Optional[SolverOptions] = None,
                   threshold: float = TIGHTNESS_THRESHOLD, scope: str = "neighbors",
                   polish: bool = True) -> SdpResult:
    """Build, solve and extract in one call.

    With ``polish`` a tight extraction is refined on its association branch
    (see :func:`refine`); the certificate itself is unchanged.
    """
    t0 = time.perf_counter()
    problem, cmap = build_sdp(instance, options, scope)
    build_time = time.perf_counter() - t0
    sol = solve_sdp(problem)
    extracted = extract(sol, cmap, threshold) if sol.ok else None
    if extracted is not None and polish:
        extracted = refine(instance, extracted)
    return SdpResult(problem, sol, extracted, build_time)
