"""Landmark localization with unknown data association, solved through a
tightened semidefinite relaxation with an eigenvalue-ratio certificate."""
from .geometry import Pose2, Rotation2, TangentVector2, between, compose, exp_se2, log_se2
from .problem import (AssociationAssignment, LandmarkMap, PriorMeasurement, ProblemInstance,
                      RelPoseMeasurement, UdaMeasurement, dead_reckon, evaluate_cost)
from .lifting import ColumnIndexMap, SymmetricMatrix, assemble_cost
from .constraints import all_constraints, verify_nullspace
from .sdp import SolverOptions, build_sdp, extract, solve_instance, solve_sdp
from .local_solver import GnOptions, enumerate_oracle, gauss_newton, max_mixture_cost
from .simulate import SimParams, generate_scenario

__version__ = "0.1.0"
