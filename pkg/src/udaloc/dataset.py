"""Ingestion of range-bearing localization logs.

A log directory holds four comma separated files with a one-line header:

``odometry.csv``      ``t, v, omega``          body-frame forward and angular velocity,
                                               held constant until the next row
``detections.csv``    ``t, landmark_id, range, bearing``
``groundtruth.csv``   ``t, x, y, heading``
``landmarks.csv``     ``id, x, y``

The landmark id of a detection is only used to score results and to estimate
noise; it never reaches the problem instance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import i0e, i1e

from .geometry import Pose2, Rotation2, TangentVector2, Trajectory, between, exp_se2, wrap_angle
from .problem import (AssociationAssignment, LandmarkMap, PriorMeasurement, ProblemInstance,
                      RelPoseMeasurement, UdaMeasurement)

log = logging.getLogger(__name__)

KAPPA_CAP = 1e6
MIN_SAMPLES = 10
# prior on the first pose of every subsequence
PRIOR_KAPPA = 100.0
PRIOR_SIGMA2 = 0.01

_FILES = {
    "odometry": ("odometry.csv", "t,v,omega"),
    "detections": ("detections.csv", "t,landmark_id,range,bearing"),
    "groundtruth": ("groundtruth.csv", "t,x,y,heading"),
    "landmarks": ("landmarks.csv", "id,x,y"),
}


class InsufficientDataError(ValueError):
    pass


@dataclass
class RawLog:
    odo_t: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    det_t: np.ndarray
    det_id: np.ndarray
    det_range: np.ndarray
    det_bearing: np.ndarray
    gt_t: np.ndarray
    gt_xy: np.ndarray
    gt_heading: np.ndarray
    landmark_ids: np.ndarray
    landmark_xy: np.ndarray

    def __post_init__(self):
        self.odo_t = np.asarray(self.odo_t, float)
        self.gt_t = np.asarray(self.gt_t, float)
        for name in ("odo_t", "gt_t"):
            t = getattr(self, name)
            if t.size and np.any(np.diff(t) <= 0):
                raise ValueError(f"{name} timestamps must be strictly increasing")
        self.det_id = np.asarray(self.det_id, dtype=np.int64)
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64)
        self.gt_xy = np.asarray(self.gt_xy, float).reshape(-1, 2)
        self.landmark_xy = np.asarray(self.landmark_xy, float).reshape(-1, 2)
        if np.any(np.asarray(self.det_range) < 0):
            raise ValueError("negative range in detections")

    @property
    def start(self) -> float:
        return float(max(self.odo_t[0], self.gt_t[0]))

    @property
    def end(self) -> float:
        return float(min(self.odo_t[-1], self.gt_t[-1]))

    def landmark_position(self, lid: int) -> np.ndarray:
        k = np.nonzero(self.landmark_ids == lid)[0]
        if not len(k):
            raise KeyError(f"unknown landmark id {lid}")
        return self.landmark_xy[k[0]]

    def ground_truth(self, t: float) -> Pose2:
        """Ground-truth pose at ``t`` (linear interpolation, unwrapped heading)."""
        if t < self.gt_t[0] - 1e-9 or t > self.gt_t[-1] + 1e-9:
            raise ValueError(f"time {t} outside the ground truth")
        x = np.interp(t, self.gt_t, self.gt_xy[:, 0])
        y = np.interp(t, self.gt_t, self.gt_xy[:, 1])
        th = np.interp(t, self.gt_t, np.unwrap(self.gt_heading))
        return Pose2(Rotation2.from_angle(th), np.array([x, y]))

    # -- persistence ---------------------------------------------------------

    def save(self, directory: Union[str, Path]) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tables = {
            "odometry": np.column_stack([self.odo_t, self.v, self.omega]),
            "detections": np.column_stack([self.det_t, self.det_id, self.det_range,
                                           self.det_bearing]),
            "groundtruth": np.column_stack([self.gt_t, self.gt_xy, self.gt_heading]),
            "landmarks": np.column_stack([self.landmark_ids, self.landmark_xy]),
        }
        for key, (fname, header) in _FILES.items():
            np.savetxt(d / fname, tables[key].reshape(-1, len(header.split(","))),
                       delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "RawLog":
        d = Path(directory)
        tabs = {}
        for key, (fname, header) in _FILES.items():
            path = d / fname
            if not path.exists():
                raise FileNotFoundError(f"missing {path}")
            arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
            tabs[key] = arr.reshape(-1, len(header.split(",")))
        o, det, gt, lm = (tabs[k] for k in ("odometry", "detections", "groundtruth", "landmarks"))
        return cls(o[:, 0], o[:, 1], o[:, 2], det[:, 0], det[:, 1].astype(np.int64), det[:, 2],
                   det[:, 3], gt[:, 0], gt[:, 1:3], gt[:, 3], lm[:, 0].astype(np.int64), lm[:, 1:3])


@dataclass(frozen=True)
class SubsequenceSpec:
    n_poses: int
    n_landmarks: int
    dt: float
    offset: float = 0.0
    match_tol: float = 1e-6   # detection timestamps within this of a pose time belong to it

    def __post_init__(self):
        if self.n_poses < 1 or self.n_landmarks < 1:
            raise ValueError("counts must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.offset < 0 or self.match_tol < 0:
            raise ValueError("offset and match_tol must be non-negative")

    @property
    def span(self) -> float:
        return (self.n_poses - 1) * self.dt

    @property
    def stride(self) -> float:
        return self.n_poses * self.dt


@dataclass(frozen=True)
class NoiseParams:
    kappa: float
    sigma2_r: float
    sigma2_landmark: float


@dataclass
class Subsequence:
    instance: ProblemInstance
    truth: Trajectory
    associations: AssociationAssignment
    times: np.ndarray
    landmark_ids: Tuple[int, ...]


# ---------------------------------------------------------------------------


def range_bearing_to_position(rng: float, bearing: float) -> np.ndarray:
    if rng < 0:
        raise ValueError("range must be non-negative")
    return np.array([rng * math.cos(bearing), rng * math.sin(bearing)])


def integrate_increment(log: RawLog, t0: float, t1: float) -> Pose2:
    """Chain zero-order-hold velocity increments over ``[t0, t1]``."""
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    ts = log.odo_t
    if t0 < ts[0] - 1e-9 or t1 > ts[-1] + 1e-9:
        raise ValueError(f"window [{t0}, {t1}] outside the odometry log [{ts[0]}, {ts[-1]}]")
    T = Pose2.identity()
    k = max(int(np.searchsorted(ts, t0, side="right")) - 1, 0)
    while k < len(ts) - 1 and ts[k] < t1:
        a, b = max(ts[k], t0), min(ts[k + 1], t1)
        if b > a:
            h = b - a
            T = T @ exp_se2(TangentVector2(log.omega[k] * h, (log.v[k] * h, 0.0)))
        k += 1
    return T


def integrate_odometry(log: RawLog, t0: float, t1: float, noise: NoiseParams,
                       from_index: int = 0) -> RelPoseMeasurement:
    T = integrate_increment(log, t0, t1)
    return RelPoseMeasurement(from_index, from_index + 1, T.rot, T.pos,
                              kappa=noise.kappa, sigma2_pos=noise.sigma2_r)


def window_starts(log: RawLog, spec: SubsequenceSpec) -> List[float]:
    """Starts of the back-to-back windows that fit inside the log."""
    first = log.start + spec.offset
    total = log.end - first - spec.span
    if total < -1e-9:
        return []
    count = int(math.floor(total / spec.stride + 1e-9)) + 1
    return [first + k * spec.stride for k in range(count)]


def _detections_at(log: RawLog, t: float, tol: float) -> np.ndarray:
    return np.nonzero(np.abs(log.det_t - t) <= tol)[0]


def extract_subsequences(log: RawLog, spec: SubsequenceSpec,
                         noise: Optional[NoiseParams] = None) -> List[Subsequence]:
    noise = noise or estimate_noise_params(log, spec)
    out = []
    for s0 in window_starts(log, spec):
        times = s0 + spec.dt * np.arange(spec.n_poses)
        det_rows = [_detections_at(log, t, spec.match_tol) for t in times]
        counts: Dict[int, int] = {}
        for rows in det_rows:
            for lid in set(log.det_id[rows].tolist()):
                counts[lid] = counts.get(lid, 0) + 1
        chosen = sorted(counts, key=lambda lid: (-counts[lid], lid))[:spec.n_landmarks]
        chosen = tuple(sorted(chosen))
        slot = {lid: j for j, lid in enumerate(chosen)}

        truth = [log.ground_truth(t) for t in times]
        odo = tuple(integrate_odometry(log, times[i], times[i + 1], noise, from_index=i)
                    for i in range(spec.n_poses - 1))
        meas, assoc = [], {}
        for i, rows in enumerate(det_rows):
            k = 0
            for r in rows:
                lid = int(log.det_id[r])
                if lid not in slot:
                    continue
                y = range_bearing_to_position(log.det_range[r], log.det_bearing[r])
                meas.append(UdaMeasurement(i, k, y, noise.sigma2_landmark,
                                           tuple(range(len(chosen)))))
                assoc[(i, k)] = slot[lid]
                k += 1
        if chosen:
            lm = LandmarkMap(np.array([log.landmark_position(l) for l in chosen]))
        else:
            lm = LandmarkMap(np.zeros((1, 2)))
        prior = PriorMeasurement(truth[0].rot, truth[0].pos, PRIOR_KAPPA, PRIOR_SIGMA2)
        inst = ProblemInstance(spec.n_poses, lm, prior, odo, tuple(meas))
        out.append(Subsequence(inst, truth, AssociationAssignment(assoc), times, chosen))
    return out


# ---------------------------------------------------------------------------
# noise estimation


def isotropic_variance(residuals: np.ndarray) -> float:
    """Mean of the per-axis sample variances of ``(n, 2)`` residuals."""
    r = np.asarray(residuals, float).reshape(-1, 2)
    if len(r) < MIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_SAMPLES} residuals, got {len(r)}")
    return float(np.mean(np.var(r, axis=0, ddof=1)))


def _bessel_ratio(kappa: float) -> float:
    return float(i1e(kappa) / i0e(kappa))


def concentration_from_angles(errors: np.ndarray) -> float:
    """Von Mises concentration whose mean resultant matches ``E[cos err]``.

    Under the cost convention used here (rotation weight equal to the inverse
    angular variance) this is the ``kappa`` of the odometry rotation term.
    """
    e = np.asarray(errors, float).ravel()
    if len(e) < MIN_SAMPLES:
        raise InsufficientDataError(f"need at least {MIN_SAMPLES} residuals, got {len(e)}")
    rbar = float(np.mean(np.cos(e)))
    if rbar >= _bessel_ratio(KAPPA_CAP):
        return KAPPA_CAP
    if rbar <= 0:
        return 1e-6
    return float(brentq(lambda k: _bessel_ratio(k) - rbar, 1e-9, KAPPA_CAP, xtol=1e-12))


def odometry_residuals(log: RawLog, spec: SubsequenceSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Angle and translation residuals of integrated odometry over every ``dt`` step."""
    first = log.start + spec.offset
    n = int(math.floor((log.end - first) / spec.dt + 1e-9))
    ang, trans = [], []
    for k in range(n):
        t0, t1 = first + k * spec.dt, first + (k + 1) * spec.dt
        odo = integrate_increment(log, t0, t1)
        gt = between(log.ground_truth(t0), log.ground_truth(t1))
        ang.append(wrap_angle(gt.rot.angle - odo.rot.angle))
        trans.append(gt.pos - odo.pos)
    return np.array(ang), np.array(trans).reshape(-1, 2)


def landmark_residuals(log: RawLog) -> np.ndarray:
    res = []
    for t, lid, rg, br in zip(log.det_t, log.det_id, log.det_range, log.det_bearing):
        if t < log.gt_t[0] or t > log.gt_t[-1]:
            continue
        T = log.ground_truth(t)
        pred = T.rot.as_matrix().T @ (log.landmark_position(int(lid)) - T.pos)
        res.append(range_bearing_to_position(rg, br) - pred)
    return np.array(res).reshape(-1, 2)


def estimate_noise_params(log: RawLog, spec: SubsequenceSpec) -> NoiseParams:
    ang, trans = odometry_residuals(log, spec)
    kappa = concentration_from_angles(ang)
    return NoiseParams(kappa, max(isotropic_variance(trans), 1e-8),
                       max(isotropic_variance(landmark_residuals(log)), 1e-8))


# ---------------------------------------------------------------------------
# synthetic logs in the same format


@dataclass(frozen=True)
class SyntheticLogParams:
    n_steps: int = 1000
    dt: float = 20.0
    odo_per_step: int = 1
    kappa: float = 50.0
    sigma2_r: float = 0.1
    sigma2_landmark: float = 0.1
    n_landmarks: int = 6
    visibility: float = 0.6
    speed: Tuple[float, float] = (0.02, 0.08)
    turn_rate_std: float = 0.01
    arena: float = 5.0          # half-width of the square the robot keeps to
    max_range: float = 6.0      # detections only within this distance
    seed: int = 0


def synthetic_log(p: SyntheticLogParams) -> RawLog:
    """Log whose odometry-vs-truth residuals per ``dt`` step have exactly the
    requested angular variance ``1/kappa`` and isotropic translation variance.

    The true path is the odometry path perturbed by a right-multiplied
    ``Exp((dphi, drho))`` each step, so the odometry itself is noise free.
    The commanded turn rate steers back toward the arena centre whenever the
    robot strays past half the arena, which keeps ranges short like an indoor log.
    A landmark is detected with probability ``visibility`` when in range; the
    nearest one is always detected so that every step has a detection.
    """
    rng = np.random.default_rng(p.seed)
    h = p.dt / p.odo_per_step
    odo_t = np.arange(p.n_steps * p.odo_per_step + 1) * h
    v = rng.uniform(*p.speed, size=len(odo_t))
    omega = rng.normal(0.0, p.turn_rate_std, size=len(odo_t))
    lm_xy = rng.uniform(-p.arena - 1.0, p.arena + 1.0, size=(p.n_landmarks, 2))

    poses = [Pose2.identity()]
    for k in range(p.n_steps):
        T = poses[-1]
        if np.linalg.norm(T.pos) > 0.5 * p.arena:
            err = wrap_angle(math.atan2(-T.pos[1], -T.pos[0]) - T.rot.angle)
            omega[k * p.odo_per_step:(k + 1) * p.odo_per_step] += 0.5 * err / p.dt
        inc = Pose2.identity()
        for r in range(k * p.odo_per_step, (k + 1) * p.odo_per_step):
            inc = inc @ exp_se2(TangentVector2(omega[r] * h, (v[r] * h, 0.0)))
        noise = exp_se2(TangentVector2(rng.normal(0.0, math.sqrt(1.0 / p.kappa)),
                                       rng.normal(0.0, math.sqrt(p.sigma2_r), 2)))
        poses.append(T @ inc @ noise)
    gt_t = np.arange(p.n_steps + 1) * p.dt
    gt_xy = np.array([T.pos for T in poses])
    gt_heading = np.array([T.rot.angle for T in poses])

    ids = np.arange(p.n_landmarks) + 1
    det = []
    for t, T in zip(gt_t, poses):
        dist = np.linalg.norm(lm_xy - T.pos, axis=1)
        seen = (dist < p.max_range) & (rng.random(p.n_landmarks) < p.visibility)
        seen[np.argmin(dist)] = True
        for j in np.nonzero(seen)[0]:
            y = T.rot.as_matrix().T @ (lm_xy[j] - T.pos)
            y = y + rng.normal(0.0, math.sqrt(p.sigma2_landmark), 2)
            det.append((t, ids[j], float(np.hypot(*y)), float(math.atan2(y[1], y[0]))))
    det = np.array(det)
    return RawLog(odo_t, v, omega, det[:, 0], det[:, 1], det[:, 2], det[:, 3],
                  gt_t, gt_xy, gt_heading, ids, lm_xy)
