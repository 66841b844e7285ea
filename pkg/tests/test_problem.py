import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fixture_path
from udaloc.geometry import Pose2, Rotation2
from udaloc.problem import (AssociationAssignment, ChainBrokenError, LandmarkMap, PriorMeasurement,
                            ProblemInstance, RelPoseMeasurement, UdaMeasurement, dead_reckon,
                            evaluate_cost)
from udaloc.simulate import SimParams, generate_scenario


def identity_prior(kappa=100.0, sigma2=100.0):
    return PriorMeasurement(Rotation2.identity(), [0.0, 0.0], kappa, sigma2)


def test_dead_reckon_hand_composition():
    rot90 = Rotation2.from_angle(math.pi / 2)
    odo = [RelPoseMeasurement(i, i + 1, rot90, [1.0, 0.0], 1.0, 1.0) for i in range(2)]
    inst = ProblemInstance(3, LandmarkMap([[0.0, 0.0]]), identity_prior(), tuple(odo))
    traj = dead_reckon(inst)
    assert np.allclose([T.pos for T in traj], [[0, 0], [1, 0], [1, 1]], atol=1e-15)


def test_dead_reckon_identity_increments_stay_at_prior():
    prior = PriorMeasurement(Rotation2.from_angle(0.4), [2.0, -1.0], 1.0, 1.0)
    odo = [RelPoseMeasurement(i, i + 1, Rotation2.identity(), [0.0, 0.0], 1.0, 1.0) for i in range(3)]
    traj = dead_reckon(ProblemInstance(4, LandmarkMap([[0.0, 0.0]]), prior, tuple(odo)))
    for T in traj:
        assert T.pos == pytest.approx([2.0, -1.0]) and T.rot.angle == pytest.approx(0.4)


def test_dead_reckon_zero_noise_recovers_truth():
    truth, _, inst = generate_scenario(SimParams(5, 2, noise_scale=0.0, seed=3))
    for a, b in zip(dead_reckon(inst), truth):
        assert np.allclose(a.as_matrix(), b.as_matrix(), atol=1e-12)


def test_missing_odometry_link_raises():
    odo = (RelPoseMeasurement(0, 1, Rotation2.identity(), [1.0, 0.0], 1.0, 1.0),)
    inst = ProblemInstance(3, LandmarkMap([[0.0, 0.0]]), identity_prior(), odo)
    with pytest.raises(ChainBrokenError):
        dead_reckon(inst)


def test_single_pose_landmark_term_by_hand():
    inst = ProblemInstance.load(fixture_path("instance_single_pose.json"))
    theta = AssociationAssignment({(0, 0): 0})
    at_origin = [Pose2.identity()]
    assert evaluate_cost(inst, at_origin, theta) == pytest.approx(0.0, abs=1e-15)
    shifted = [Pose2(Rotation2.identity(), np.array([0.1, 0.0]))]
    prior_term = 0.01 / inst.prior.sigma2_prior
    assert evaluate_cost(inst, shifted, theta) == pytest.approx(0.01 / 1.0 + prior_term, rel=1e-12)


def test_zero_noise_ground_truth_cost_is_zero():
    truth, assoc, inst = generate_scenario(SimParams(3, 2, noise_scale=0.0, sigma2_landmark=0.0, seed=0))
    assert evaluate_cost(inst, truth, assoc) == pytest.approx(0.0, abs=1e-12)


def test_unused_candidate_does_not_change_cost():
    truth, assoc, inst = generate_scenario(SimParams(3, 2, seed=4))
    d = inst.to_dict()
    d["landmarks"].append([100.0, 100.0])
    for m in d["measurements"]:
        m["candidates"] = m["candidates"] + [2]
    bigger = ProblemInstance.from_dict(d)
    assert evaluate_cost(bigger, truth, assoc) == evaluate_cost(inst, truth, assoc)


def test_anisotropic_noise_rejected():
    with pytest.raises(ValueError):
        UdaMeasurement(0, 0, [1.0, 0.0], np.diag([1.0, 2.0]), (0,))
    m = UdaMeasurement(0, 0, [1.0, 0.0], 2.0 * np.eye(2), (0,))
    assert m.sigma2 == 2.0


@pytest.mark.parametrize("kwargs", [
    dict(timestep=0, meas_index=0, y=[0, 0], sigma2=0.0, candidates=(0,)),
    dict(timestep=0, meas_index=0, y=[0, 0], sigma2=1.0, candidates=()),
    dict(timestep=0, meas_index=0, y=[0, 0], sigma2=1.0, candidates=(0, 0)),
    dict(timestep=0, meas_index=0, y=[np.nan, 0], sigma2=1.0, candidates=(0,)),
])
def test_invalid_measurements(kwargs):
    with pytest.raises(ValueError):
        UdaMeasurement(**kwargs)


def test_invalid_instances():
    lm = LandmarkMap([[0.0, 0.0]])
    with pytest.raises(ValueError):
        RelPoseMeasurement(0, 2, Rotation2.identity(), [0, 0], 1.0, 1.0)
    with pytest.raises(ValueError):
        ProblemInstance(2, lm, identity_prior(), (), (UdaMeasurement(5, 0, [0, 0], 1.0, (0,)),))
    with pytest.raises(ValueError):
        ProblemInstance(2, lm, identity_prior(), (), (UdaMeasurement(0, 0, [0, 0], 1.0, (3,)),))
    with pytest.raises(ValueError):
        LandmarkMap(np.zeros((0, 2)))


def test_assignment_indicator_and_check():
    _, assoc, inst = generate_scenario(SimParams(3, 2, seed=0))
    ind = assoc.indicator(inst)
    assert ind.shape == (inst.n_theta,)
    assert ind.sum() == len(inst.uda_measurements)
    assoc.check(inst)
    with pytest.raises(ValueError):
        AssociationAssignment({(0, 0): 0}).check(inst)
    assert AssociationAssignment.from_list(assoc.to_list()) == assoc


@pytest.mark.parametrize("name", ["instance_3x2.json", "instance_5x3.json", "instance_single_pose.json"])
def test_fixture_round_trip(name, tmp_path):
    inst = ProblemInstance.load(fixture_path(name))
    out = tmp_path / "x.json"
    inst.save(out)
    again = ProblemInstance.load(out)
    assert json.loads(out.read_text()) == again.to_dict()
    assert again.to_dict() == inst.to_dict()


def test_fixture_matches_generator():
    d = json.loads(open(fixture_path("instance_3x2.json")).read())
    truth, assoc, inst = generate_scenario(SimParams(3, 2, 0.1, 0.5, seed=0))
    assert ProblemInstance.from_dict(d).to_dict() == inst.to_dict()
    assert d["_associations"] == assoc.to_list()


@given(st.integers(0, 10_000), st.floats(0.0, 60.0), st.floats(0.0, 5.0))
def test_cost_is_nonnegative(seed, noise, s2):
    truth, assoc, inst = generate_scenario(SimParams(3, 2, noise, s2, seed=seed))
    rng = np.random.default_rng(seed)
    traj = [Pose2(Rotation2.from_angle(rng.uniform(-3, 3)), rng.normal(size=2)) for _ in range(3)]
    assert evaluate_cost(inst, traj, assoc) >= 0.0
    assert evaluate_cost(inst, truth, assoc) >= 0.0
