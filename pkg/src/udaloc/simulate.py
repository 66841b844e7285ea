"""Synthetic scenario generation for Monte Carlo trials."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geometry import Pose2, Rotation2, TangentVector2, Trajectory, between, exp_se2
from .problem import (AssociationAssignment, LandmarkMap, PriorMeasurement, ProblemInstance,
                      RelPoseMeasurement, UdaMeasurement)

BASE_INV_KAPPA = 0.01     # 1/rad^2
BASE_SIGMA2_R = 0.745     # m^2


@dataclass(frozen=True)
class SimParams:
    n_poses: int = 3
    n_landmarks: int = 2
    noise_scale: float = 0.1          # multiplier on the base odometry noise
    sigma2_landmark: float = 0.5      # m^2
    base_inv_kappa: float = BASE_INV_KAPPA
    base_sigma2_r: float = BASE_SIGMA2_R
    prior_kappa: float = 100.0
    prior_sigma2: float = 0.01
    landmark_bounds: Tuple[float, float] = (0.0, 10.0)
    meas_per_step: int = 1
    seed: int = 0
    # estimator variance standing in for an exactly zero generating variance
    zero_noise_variance: float = 1e-2

    def __post_init__(self):
        if self.n_poses < 1 or self.n_landmarks < 1 or self.meas_per_step < 1:
            raise ValueError("counts must be positive")
        if self.noise_scale < 0 or self.sigma2_landmark < 0:
            raise ValueError("noise scales must be non-negative")
        if not self.zero_noise_variance > 0:
            raise ValueError("zero_noise_variance must be positive")
        if not (self.prior_kappa > 0 and self.prior_sigma2 > 0):
            raise ValueError("prior weights must be positive")


def _weight_variance(v: float, params: SimParams) -> float:
    # noise-free data still needs a finite weight; tiny variances make the
    # data terms swamp the prior, which alone separates mirror solutions.
    # Subnormal variances count as zero since their inverse overflows.
    return v if v >= np.finfo(float).tiny else params.zero_noise_variance


def odometry_noise(params: SimParams) -> Tuple[float, float]:
    """Effective ``(1/kappa, sigma_r^2)`` used to corrupt relative poses."""
    return params.noise_scale * params.base_inv_kappa, params.noise_scale * params.base_sigma2_r


def random_poses(n: int, rng: np.random.Generator) -> Trajectory:
    return [exp_se2(TangentVector2(rng.uniform(0.0, 2 * math.pi), rng.normal(size=2)))
            for _ in range(n)]


def generate_scenario(params: SimParams, rng: np.random.Generator = None
                      ) -> Tuple[Trajectory, AssociationAssignment, ProblemInstance]:
    """Ground truth, true associations and the noisy problem instance."""
    rng = np.random.default_rng(params.seed) if rng is None else rng
    truth = random_poses(params.n_poses, rng)
    lo, hi = params.landmark_bounds
    landmarks = rng.uniform(lo, hi, size=(params.n_landmarks, 2))

    inv_kappa, sig2_r = odometry_noise(params)
    odo = []
    for k in range(params.n_poses - 1):
        d = between(truth[k], truth[k + 1])
        dphi = rng.normal(0.0, math.sqrt(inv_kappa))
        dr = rng.normal(0.0, math.sqrt(sig2_r), 2)
        odo.append(RelPoseMeasurement(
            k, k + 1, d.rot @ Rotation2.from_angle(dphi), d.pos + dr,
            kappa=1.0 / _weight_variance(inv_kappa, params),
            sigma2_pos=_weight_variance(sig2_r, params)))

    meas = []
    assoc = {}
    sig2_l = params.sigma2_landmark
    for i, T in enumerate(truth):
        for k in range(params.meas_per_step):
            j = int(rng.integers(params.n_landmarks))
            y = T.rot.inverse() @ (landmarks[j] - T.pos) + rng.normal(0.0, math.sqrt(sig2_l), 2)
            meas.append(UdaMeasurement(i, k, y, _weight_variance(sig2_l, params),
                                       tuple(range(params.n_landmarks))))
            assoc[(i, k)] = j

    prior = PriorMeasurement(truth[0].rot, truth[0].pos, params.prior_kappa, params.prior_sigma2)
    inst = ProblemInstance(params.n_poses, LandmarkMap(landmarks), prior, tuple(odo), tuple(meas))
    return truth, AssociationAssignment(assoc), inst


# the paper's simulation grid: (n_poses, n_landmarks, noise scale, landmark variance)
PAPER_GRID = {
    "n_poses": (3, 5),
    "n_landmarks": (2, 3),
    "noise_scale": (0.1, 1, 10, 20, 30, 40, 50, 60),
    "sigma2_landmark": (0.5, 1, 2, 3, 4, 5),
}
PAPER_TRIALS_PER_CELL = 10
