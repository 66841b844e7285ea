"""Max-Mixture Gauss-Newton baseline and the brute-force enumeration oracle."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .geometry import SKEW, Pose2, Rotation2, Trajectory
from .problem import AssociationAssignment, ProblemInstance, continuous_cost, evaluate_cost

log = logging.getLogger(__name__)

MAX_BRANCHES = 1 << 20


class BranchLimitError(ValueError):
    pass


@dataclass(frozen=True)
class GnOptions:
    max_iters: int = 100
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    damping_floor: float = 1e-6
    max_damping_tries: int = 30

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not (self.step_tol > 0 and self.cost_tol > 0 and self.damping_floor > 0):
            raise ValueError("tolerances must be positive")


@dataclass
class LocalResult:
    trajectory: Trajectory
    cost: float
    converged: bool
    iterations: int
    associations: AssociationAssignment


# ---------------------------------------------------------------------------
# association selection


def _packed(instance: ProblemInstance):
    meas = instance.uda_measurements
    t = np.array([m.timestep for m in meas], dtype=np.int64)
    ys = np.array([m.y for m in meas]).reshape(-1, 2)
    s2 = np.array([m.sigma2 for m in meas], dtype=float)
    cands = kernels.pack_candidates([m.candidates for m in meas])
    return t, ys, s2, cands


def _best_landmarks(instance: ProblemInstance, traj: Sequence[Pose2]):
    if not instance.uda_measurements:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    rots = np.array([T.rot.as_matrix() for T in traj])
    pos = np.array([T.pos for T in traj])
    t, ys, s2, cands = _packed(instance)
    return kernels.min_landmark_residuals(rots, pos, t, ys, s2, cands,
                                          instance.landmarks.positions)


def recover_associations(instance: ProblemInstance, traj: Sequence[Pose2]) -> AssociationAssignment:
    """Per-measurement cheapest landmark, ties broken towards the smallest index."""
    best, _ = _best_landmarks(instance, traj)
    return AssociationAssignment({m.key: int(j) for m, j in zip(instance.uda_measurements, best)})


def max_mixture_cost(instance: ProblemInstance, traj: Sequence[Pose2]) -> float:
    _, costs = _best_landmarks(instance, traj)
    return continuous_cost(instance, traj) + float(np.sum(costs))


# ---------------------------------------------------------------------------
# residuals and Jacobians (right perturbation: C <- C Exp(dphi), r <- r + C drho)


def residuals(instance: ProblemInstance, traj: Sequence[Pose2],
              theta: AssociationAssignment) -> Tuple[np.ndarray, np.ndarray]:
    """Whitened residual ``e`` (cost = e.e) and its Jacobian w.r.t. ``[phi_i, rho_i]`` stacks."""
    n = instance.n_poses
    rows: List[np.ndarray] = []
    jacs: List[np.ndarray] = []

    def block(nr):
        J = np.zeros((nr, 3 * n))
        jacs.append(J)
        return J

    Cs = [T.rot.as_matrix() for T in traj]
    p = instance.prior
    w = math.sqrt(p.kappa_prior)
    rows.append(w * (Cs[0] - p.rot_check.as_matrix()).ravel())
    J = block(4)
    J[:, 0] = w * (Cs[0] @ SKEW).ravel()
    w = 1.0 / math.sqrt(p.sigma2_prior)
    rows.append(w * (traj[0].pos - p.pos_check))
    J = block(2)
    J[:, 1:3] = w * Cs[0]

    for m in instance.odometry:
        a, b = m.from_index, m.to_index
        dC = m.delta_rot.as_matrix()
        w = math.sqrt(m.kappa)
        rows.append(w * (Cs[b] - Cs[a] @ dC).ravel())
        J = block(4)
        J[:, 3 * b] = w * (Cs[b] @ SKEW).ravel()
        J[:, 3 * a] = -w * (Cs[a] @ SKEW @ dC).ravel()
        w = 1.0 / math.sqrt(m.sigma2_pos)
        rows.append(w * (traj[b].pos - traj[a].pos - Cs[a] @ m.delta_pos))
        J = block(2)
        J[:, 3 * b + 1:3 * b + 3] = w * Cs[b]
        J[:, 3 * a + 1:3 * a + 3] = -w * Cs[a]
        J[:, 3 * a] = -w * (Cs[a] @ SKEW @ m.delta_pos)

    L = instance.landmarks.positions
    for meas in instance.uda_measurements:
        i = meas.timestep
        w = 1.0 / math.sqrt(meas.sigma2)
        rows.append(w * (L[theta[meas.key]] - traj[i].pos - Cs[i] @ meas.y))
        J = block(2)
        J[:, 3 * i + 1:3 * i + 3] = -w * Cs[i]
        J[:, 3 * i] = -w * (Cs[i] @ SKEW @ meas.y)
    return np.concatenate(rows), np.vstack(jacs)


def retract(traj: Sequence[Pose2], delta: np.ndarray) -> Trajectory:
    out = []
    for i, T in enumerate(traj):
        dphi, drho = delta[3 * i], delta[3 * i + 1:3 * i + 3]
        out.append(Pose2(T.rot @ Rotation2.from_angle(dphi), T.pos + T.rot.as_matrix() @ drho))
    return out


# ---------------------------------------------------------------------------


def _solve_normal(J: np.ndarray, e: np.ndarray, lam: float) -> np.ndarray:
    H = J.T @ J
    g = J.T @ e
    if lam > 0:
        H = H + lam * np.diag(np.maximum(np.diag(H), 1.0))
    try:
        return -np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        return -np.linalg.lstsq(H, g, rcond=None)[0]


def gauss_newton(instance: ProblemInstance, init: Sequence[Pose2],
                 opts: Optional[GnOptions] = None,
                 assignment: Optional[AssociationAssignment] = None) -> LocalResult:
    """Max-Mixture Gauss-Newton from ``init``.

    With ``assignment`` given the associations stay fixed (one enumeration
    branch); otherwise they are re-selected before every step.
    """
    opts = opts or GnOptions()
    if len(init) != instance.n_poses:
        raise ValueError("initial trajectory length does not match the instance")
    fixed = assignment is not None

    def cost_of(traj):
        if fixed:
            return evaluate_cost(instance, traj, assignment)
        return max_mixture_cost(instance, traj)

    traj = list(init)
    cost = cost_of(traj)
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        theta = assignment if fixed else recover_associations(instance, traj)
        e, J = residuals(instance, traj, theta)
        lam = 0.0
        accepted = False
        for _ in range(opts.max_damping_tries):
            delta = _solve_normal(J, e, lam)
            cand = retract(traj, delta)
            new_cost = cost_of(cand)
            if new_cost <= cost:
                accepted = True
                break
            lam = opts.damping_floor if lam == 0.0 else lam * 10.0
        if not accepted:
            # no descent direction left at machine precision counts as converged
            converged = np.linalg.norm(J.T @ e) <= 1e-8 * max(1.0, cost)
            break
        decrease = cost - new_cost
        traj, cost = cand, new_cost
        if np.linalg.norm(delta) < opts.step_tol or decrease <= opts.cost_tol * max(1.0, cost):
            converged = True
            break
    theta = assignment if fixed else recover_associations(instance, traj)
    log.debug("gauss-newton: cost=%.9g iters=%d converged=%s", cost, it, converged)
    return LocalResult(traj, float(cost), bool(converged), it, theta)


def count_branches(instance: ProblemInstance) -> int:
    return int(np.prod([len(m.candidates) for m in instance.uda_measurements], dtype=float))


def enumerate_oracle(instance: ProblemInstance, init: Sequence[Pose2],
                     opts: Optional[GnOptions] = None, max_branches: int = MAX_BRANCHES
                     ) -> Tuple[float, AssociationAssignment, Trajectory]:
    """Fixed-assignment Gauss-Newton from ``init`` on every hard assignment; keep the best."""
    n = count_branches(instance)
    if n > max_branches:
        raise BranchLimitError(f"{n} association branches exceed the cap of {max_branches}")
    meas = instance.uda_measurements
    best: Tuple[float, AssociationAssignment, Trajectory] = (math.inf, None, None)
    for combo in itertools.product(*(m.candidates for m in meas)):
        theta = AssociationAssignment({m.key: j for m, j in zip(meas, combo)})
        res = gauss_newton(instance, init, opts, assignment=theta)
        if res.cost < best[0]:
            best = (res.cost, theta, res.trajectory)
    return best
