"""Localization problem definition, cost evaluation and (de)serialization.

Indices are 0-based throughout: poses ``0..N-1``, landmarks ``0..n_l-1`` and
measurement slots ``k`` within a timestep.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .geometry import Pose2, Rotation2, Trajectory, compose


class ChainBrokenError(ValueError):
    """The odometry chain does not link every consecutive pose pair."""


def _vec2(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(2)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite 2-vector")
    return a


def _isotropic_variance(sigma2) -> float:
    """Accept a scalar or a covariance that is a multiple of identity."""
    s = np.asarray(sigma2, dtype=float)
    if s.ndim == 0:
        return float(s)
    if s.shape != (2, 2) or not np.allclose(s, s[0, 0] * np.eye(2)):
        raise ValueError("only isotropic (scalar * identity) noise models are supported")
    return float(s[0, 0])


@dataclass(frozen=True)
class LandmarkMap:
    positions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if p.shape[0] < 1 or not np.all(np.isfinite(p)):
            raise ValueError("landmark map needs at least one finite position")
        object.__setattr__(self, "positions", p)

    def __len__(self):
        return self.positions.shape[0]

    def __getitem__(self, j):
        return self.positions[j]


@dataclass(frozen=True)
class RelPoseMeasurement:
    from_index: int
    to_index: int
    delta_rot: Rotation2
    delta_pos: np.ndarray
    kappa: float
    sigma2_pos: float

    def __post_init__(self):
        if self.to_index != self.from_index + 1:
            raise ValueError("relative pose measurements must link consecutive poses")
        object.__setattr__(self, "delta_pos", _vec2(self.delta_pos))
        object.__setattr__(self, "sigma2_pos", _isotropic_variance(self.sigma2_pos))
        if not (self.kappa > 0 and self.sigma2_pos > 0):
            raise ValueError("odometry weights must be positive")

    @property
    def delta(self) -> Pose2:
        return Pose2(self.delta_rot, self.delta_pos)


@dataclass(frozen=True)
class PriorMeasurement:
    rot_check: Rotation2
    pos_check: np.ndarray
    kappa_prior: float
    sigma2_prior: float

    def __post_init__(self):
        object.__setattr__(self, "pos_check", _vec2(self.pos_check))
        object.__setattr__(self, "sigma2_prior", _isotropic_variance(self.sigma2_prior))
        if not (self.kappa_prior > 0 and self.sigma2_prior > 0):
            raise ValueError("prior weights must be positive")


@dataclass(frozen=True)
class UdaMeasurement:
    """Relative landmark position measurement with unknown association."""

    timestep: int
    meas_index: int
    y: np.ndarray
    sigma2: float
    candidates: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "y", _vec2(self.y))
        object.__setattr__(self, "sigma2", _isotropic_variance(self.sigma2))
        cands = tuple(int(j) for j in self.candidates)
        if not cands:
            raise ValueError("candidate set must be non-empty")
        if len(set(cands)) != len(cands):
            raise ValueError("duplicate candidates")
        object.__setattr__(self, "candidates", cands)
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")

    @property
    def key(self) -> Tuple[int, int]:
        return (self.timestep, self.meas_index)


@dataclass(frozen=True)
class ProblemInstance:
    n_poses: int
    landmarks: LandmarkMap
    prior: PriorMeasurement
    odometry: Tuple[RelPoseMeasurement, ...] = ()
    uda_measurements: Tuple[UdaMeasurement, ...] = ()

    def __post_init__(self):
        if self.n_poses < 1:
            raise ValueError("need at least one pose")
        if not isinstance(self.landmarks, LandmarkMap):
            object.__setattr__(self, "landmarks", LandmarkMap(self.landmarks))
        odo = tuple(sorted(self.odometry, key=lambda m: m.from_index))
        meas = tuple(sorted(self.uda_measurements, key=lambda m: m.key))
        object.__setattr__(self, "odometry", odo)
        object.__setattr__(self, "uda_measurements", meas)
        for m in odo:
            if not 0 <= m.from_index < self.n_poses - 1:
                raise ValueError(f"odometry index {m.from_index} out of range")
        keys = set()
        for m in meas:
            if not 0 <= m.timestep < self.n_poses:
                raise ValueError(f"measurement timestep {m.timestep} out of range")
            if m.key in keys:
                raise ValueError(f"duplicate measurement key {m.key}")
            keys.add(m.key)
            if any(not 0 <= j < len(self.landmarks) for j in m.candidates):
                raise ValueError("candidate landmark index out of range")

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    @property
    def n_theta(self) -> int:
        return sum(len(m.candidates) for m in self.uda_measurements)

    def odometry_chain(self) -> List[RelPoseMeasurement]:
        """Odometry ordered by pose; raises if any link is missing or repeated."""
        by_from: Dict[int, RelPoseMeasurement] = {}
        for m in self.odometry:
            if m.from_index in by_from:
                raise ChainBrokenError(f"duplicate odometry link from pose {m.from_index}")
            by_from[m.from_index] = m
        missing = [i for i in range(self.n_poses - 1) if i not in by_from]
        if missing:
            raise ChainBrokenError(f"missing odometry link(s) from pose(s) {missing}")
        return [by_from[i] for i in range(self.n_poses - 1)]

    # serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n_poses": self.n_poses,
            "landmarks": self.landmarks.positions.tolist(),
            "prior": {
                "rot_cs": [self.prior.rot_check.c, self.prior.rot_check.s],
                "pos": self.prior.pos_check.tolist(),
                "kappa": self.prior.kappa_prior,
                "sigma2": self.prior.sigma2_prior,
            },
            "odometry": [
                {
                    "from": m.from_index,
                    "to": m.to_index,
                    "rot_cs": [m.delta_rot.c, m.delta_rot.s],
                    "pos": m.delta_pos.tolist(),
                    "kappa": m.kappa,
                    "sigma2": m.sigma2_pos,
                }
                for m in self.odometry
            ],
            "measurements": [
                {
                    "timestep": m.timestep,
                    "k": m.meas_index,
                    "y": m.y.tolist(),
                    "sigma2": m.sigma2,
                    "candidates": list(m.candidates),
                }
                for m in self.uda_measurements
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemInstance":
        p = d["prior"]
        prior = PriorMeasurement(Rotation2(*p["rot_cs"]), p["pos"], p["kappa"], p["sigma2"])
        odo = [
            RelPoseMeasurement(o["from"], o["to"], Rotation2(*o["rot_cs"]), o["pos"],
                               o["kappa"], o["sigma2"])
            for o in d.get("odometry", [])
        ]
        n_l = len(d["landmarks"])
        meas = [
            UdaMeasurement(m["timestep"], m["k"], m["y"], m["sigma2"],
                           m.get("candidates", list(range(n_l))))
            for m in d.get("measurements", [])
        ]
        return cls(int(d["n_poses"]), LandmarkMap(d["landmarks"]), prior, tuple(odo), tuple(meas))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ProblemInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class AssociationAssignment:
    """Hard data association ``(timestep, k) -> landmark index``."""

    theta: Dict[Tuple[int, int], int] = field(default_factory=dict)

    @property
    def n_theta(self) -> int:
        return len(self.theta)

    def __getitem__(self, key):
        return self.theta[key]

    def keys(self):
        return self.theta.keys()

    def __eq__(self, other):
        return isinstance(other, AssociationAssignment) and self.theta == other.theta

    def indicator(self, instance: ProblemInstance) -> np.ndarray:
        """Boolean vector over the instance's theta variables (measurement-major)."""
        out = []
        for m in instance.uda_measurements:
            j = self.theta[m.key]
            if j not in m.candidates:
                raise ValueError(f"assignment {m.key}->{j} not among candidates")
            out.extend(1.0 if c == j else 0.0 for c in m.candidates)
        return np.array(out)

    def check(self, instance: ProblemInstance) -> None:
        keys = {m.key for m in instance.uda_measurements}
        if set(self.theta) != keys:
            raise ValueError("assignment domain does not match the instance measurements")
        self.indicator(instance)

    def to_list(self):
        return [[i, k, j] for (i, k), j in sorted(self.theta.items())]

    @classmethod
    def from_list(cls, rows) -> "AssociationAssignment":
        return cls({(int(i), int(k)): int(j) for i, k, j in rows})


def dead_reckon(instance: ProblemInstance) -> Trajectory:
    """Chain the odometry from the prior mean."""
    traj = [Pose2(instance.prior.rot_check, instance.prior.pos_check)]
    for m in instance.odometry_chain():
        traj.append(compose(traj[-1], m.delta))
    return traj


def landmark_residual(C: np.ndarray, r: np.ndarray, ell: np.ndarray, y: np.ndarray,
                      sigma2: float) -> float:
    e = (ell - r) - C @ y
    return float(e @ e) / sigma2


def continuous_cost(instance: ProblemInstance, traj: Sequence[Pose2]) -> float:
    """Odometry plus prior cost (the association-independent part)."""
    if len(traj) != instance.n_poses:
        raise ValueError("trajectory length does not match the instance")
    p = instance.prior
    C0 = traj[0].rot.as_matrix()
    J = p.kappa_prior * np.sum((C0 - p.rot_check.as_matrix()) ** 2)
    d = traj[0].pos - p.pos_check
    J += (d @ d) / p.sigma2_prior
    for m in instance.odometry:
        Ck = traj[m.from_index].rot.as_matrix()
        Cn = traj[m.to_index].rot.as_matrix()
        J += m.kappa * np.sum((Cn - Ck @ m.delta_rot.as_matrix()) ** 2)
        e = traj[m.to_index].pos - traj[m.from_index].pos - Ck @ m.delta_pos
        J += (e @ e) / m.sigma2_pos
    return float(J)


def evaluate_cost(instance: ProblemInstance, traj: Sequence[Pose2],
                  theta: AssociationAssignment) -> float:
    """Full localization cost for a trajectory and hard associations."""
    J = continuous_cost(instance, traj)
    L = instance.landmarks.positions
    for m in instance.uda_measurements:
        j = theta[m.key]
        T = traj[m.timestep]
        J += landmark_residual(T.rot.as_matrix(), T.pos, L[j], m.y, m.sigma2)
    return J
