"""Planar rigid-body algebra: SO(2) and SE(2).

Rotations are stored as a ``(c, s)`` pair for the matrix ``[[c, -s], [s, c]]``
so that the lifted-variable blocks read off directly. Poses act on points as
``p_world = C @ p_body + r``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

_SMALL_ANGLE = 1e-7

# generator of so(2): d/dphi R(phi) = R(phi) @ SKEW
SKEW = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class Rotation2:
    c: float = 1.0
    s: float = 0.0

    def __post_init__(self):
        n2 = self.c * self.c + self.s * self.s
        if not math.isfinite(n2) or abs(n2 - 1.0) > 1e-12:
            n = math.sqrt(n2)
            if not math.isfinite(n) or n == 0.0:
                raise ValueError(f"invalid rotation ({self.c}, {self.s})")
            object.__setattr__(self, "c", self.c / n)
            object.__setattr__(self, "s", self.s / n)

    @classmethod
    def from_angle(cls, phi: float) -> "Rotation2":
        return cls(math.cos(phi), math.sin(phi))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation2":
        """Closest rotation to a 2x2 matrix (first column direction after polar projection)."""
        m = np.asarray(m, dtype=float)
        u, _, vt = np.linalg.svd(m)
        q = u @ vt
        if np.linalg.det(q) < 0:
            # reflect; the caller is responsible for flagging improper input
            u[:, -1] *= -1
            q = u @ vt
        return cls(q[0, 0], q[1, 0])

    @classmethod
    def identity(cls) -> "Rotation2":
        return cls(1.0, 0.0)

    @property
    def angle(self) -> float:
        return math.atan2(self.s, self.c)

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.c, -self.s], [self.s, self.c]])

    def inverse(self) -> "Rotation2":
        return Rotation2(self.c, -self.s)

    def __matmul__(self, other):
        if isinstance(other, Rotation2):
            return Rotation2(self.c * other.c - self.s * other.s,
                             self.s * other.c + self.c * other.s)
        v = np.asarray(other, dtype=float)
        return self.as_matrix() @ v


@dataclass(frozen=True)
class TangentVector2:
    phi: float
    rho: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float).reshape(2)
        if not (math.isfinite(self.phi) and np.all(np.isfinite(rho))):
            raise ValueError("tangent vector must be finite")
        object.__setattr__(self, "rho", rho)

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.rho[0], self.rho[1]])


@dataclass(frozen=True)
class Pose2:
    rot: Rotation2 = field(default_factory=Rotation2.identity)
    pos: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float).reshape(2).copy())

    @classmethod
    def identity(cls) -> "Pose2":
        return cls()

    @classmethod
    def from_xytheta(cls, x: float, y: float, theta: float) -> "Pose2":
        return cls(Rotation2.from_angle(theta), np.array([x, y]))

    def inverse(self) -> "Pose2":
        rinv = self.rot.inverse()
        return Pose2(rinv, -(rinv @ self.pos))

    def as_matrix(self) -> np.ndarray:
        t = np.eye(3)
        t[:2, :2] = self.rot.as_matrix()
        t[:2, 2] = self.pos
        return t

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


Trajectory = List[Pose2]


def _left_jacobian(phi: float) -> np.ndarray:
    if abs(phi) < _SMALL_ANGLE:
        a = 1.0 - phi * phi / 6.0
        b = phi / 2.0 - phi ** 3 / 24.0
    else:
        a = math.sin(phi) / phi
        b = (1.0 - math.cos(phi)) / phi
    return np.array([[a, -b], [b, a]])


def exp_se2(xi: TangentVector2) -> Pose2:
    """SE(2) exponential: rotation by ``phi``, translation ``V(phi) @ rho``."""
    return Pose2(Rotation2.from_angle(xi.phi), _left_jacobian(xi.phi) @ xi.rho)


def log_se2(T: Pose2) -> TangentVector2:
    """Inverse of :func:`exp_se2` with ``phi`` in ``(-pi, pi]``."""
    phi = T.rot.angle
    if phi == -math.pi:
        phi = math.pi
    rho = np.linalg.solve(_left_jacobian(phi), T.pos)
    return TangentVector2(phi, rho)


def compose(A: Pose2, B: Pose2) -> Pose2:
    return Pose2(A.rot @ B.rot, A.pos + A.rot @ B.pos)


def between(A: Pose2, B: Pose2) -> Pose2:
    """Relative pose ``A^-1 B``."""
    return compose(A.inverse(), B)


def trajectory_arrays(traj: Sequence[Pose2]):
    """Stack a trajectory into ``(N, 2, 2)`` rotations and ``(N, 2)`` positions."""
    rots = np.array([T.rot.as_matrix() for T in traj])
    pos = np.array([T.pos for T in traj])
    return rots, pos


def trajectory_from_arrays(rots: np.ndarray, pos: np.ndarray) -> Trajectory:
    return [Pose2(Rotation2.from_matrix(C), r) for C, r in zip(rots, pos)]


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w
