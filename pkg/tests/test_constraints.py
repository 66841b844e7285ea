import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from udaloc.constraints import (FAMILIES, ConstraintMatrix, all_constraints, build_feasible_point,
                                closure_constraints, column_structure_constraints,
                                combined_constraints, constraint_rank, deduplicate,
                                discrete_constraints, independent_subset, initial_constraints,
                                moment_constraints, random_assignment, random_feasible_point,
                                random_trajectory, verify_nullspace)
from udaloc.geometry import Pose2
from udaloc.lifting import ColumnIndexMap, SymmetricMatrix, pose_cols
from udaloc.problem import AssociationAssignment, ProblemInstance
from udaloc.simulate import SimParams, generate_scenario


def make(n_poses=3, n_landmarks=2, seed=0, scope="neighbors"):
    _, _, inst = generate_scenario(SimParams(n_poses, n_landmarks, seed=seed))
    return inst, ColumnIndexMap(inst, scope)


def residuals(cons, Z):
    return np.array([c.residual(Z) for c in cons])


def test_feasible_point_layout():
    inst, cmap = make()
    traj = [Pose2.identity()] * 3
    theta = AssociationAssignment({m.key: 0 for m in inst.uda_measurements})
    fp = build_feasible_point(traj, theta, 1, cmap)
    for i in range(3):
        c1, c2, r = pose_cols(i)
        assert np.array_equal(fp.column(c1), [1, 0]) and np.array_equal(fp.column(c2), [0, 1])
    for t in range(cmap.n_theta):
        on = cmap.theta_landmark[t] == 0
        assert np.array_equal(fp.column(cmap.theta_cols(t)[0]), [1.0 * on, 0])
    neg = build_feasible_point(traj, theta, -1, cmap)
    assert np.array_equal(neg.X, -fp.X)
    with pytest.raises(ValueError):
        build_feasible_point(traj, theta, 0, cmap)


def test_feasible_gram_has_rank_two(rng):
    inst, cmap = make(5, 3)
    fp, _, _ = random_feasible_point(inst, cmap, rng)
    ev = np.linalg.eigvalsh(fp.gram())
    assert np.sum(ev > 1e-9 * ev.max()) == 2


def test_initial_count_without_theta():
    for n in (1, 2, 3, 5):
        inst, _ = make(n)
        bare = ProblemInstance(n, inst.landmarks, inst.prior, inst.odometry, ())
        cons = initial_constraints(ColumnIndexMap(bare))
        fam = Counter(c.family for c in cons)
        # three homogenization rows and five rotation constraints per pose
        assert fam["homogenization"] == 3
        assert fam["orthonormality"] + fam["dcm-structure"] == 5 * n
        assert len(cons) == 3 + 5 * n


def test_discrete_counts_single_pose():
    inst, cmap = make(1, 2)
    fam = Counter(c.family for c in discrete_constraints(cmap))
    assert fam == {"discrete-sum": 1, "discrete-boolean": 2, "discrete-product": 1}


def test_premultiplied_sum_needs_two_measurements_per_step():
    _, _, inst = generate_scenario(SimParams(2, 2, meas_per_step=2))
    fam = Counter(c.family for c in discrete_constraints(ColumnIndexMap(inst)))
    # each ordered pair of measurements at a step, one per theta of the multiplier
    assert fam["discrete-premul-sum"] == 2 * 2 * 2


def test_column_structure_pairs():
    inst, cmap = make(1, 2)
    cons = column_structure_constraints(cmap)
    cross = [c for c in cons if len({cmap.factors[n][0] for n in c.A.support()}) == 2]
    assert len(cross) == 2
    assert {frozenset(c.A.support()) for c in cross} == {
        frozenset({"th0_1", "th1_2"}), frozenset({"th0_2", "th1_1"})}


def test_no_measurements_only_initial():
    inst, _ = make(3)
    bare = ProblemInstance(3, inst.landmarks, inst.prior, inst.odometry, ())
    cmap = ColumnIndexMap(bare)
    for fn in (discrete_constraints, combined_constraints, moment_constraints,
               column_structure_constraints):
        assert fn(cmap) == []


def test_only_homogenization_has_rhs():
    _, cmap = make()
    cons = all_constraints(cmap)
    rhs = [c.rhs for c in cons]
    assert rhs[0] == 1.0 and not any(rhs[1:])
    assert cons[0].family == "homogenization"


def test_golden_counts():
    _, cmap = make(3, 2)
    cons = all_constraints(cmap)
    assert len(cons) == 1533
    assert constraint_rank(cons) == 989
    assert len(independent_subset(cons)) == 989
    again = all_constraints(make(3, 2, seed=9)[1])
    assert Counter(c.family for c in cons) == Counter(c.family for c in again)


def test_deduplicate_drops_exact_copies():
    _, cmap = make()
    cons = initial_constraints(cmap)
    assert len(deduplicate(cons + cons)) == len(cons)


def test_independent_subset_keeps_span(rng):
    _, cmap = make(3, 2)
    cons = all_constraints(cmap)
    sub = independent_subset(cons)
    assert constraint_rank(sub) == len(sub) == constraint_rank(cons)
    assert sub[0].rhs == 1.0


def test_unknown_family_rejected():
    _, cmap = make()
    with pytest.raises(ValueError):
        ConstraintMatrix(SymmetricMatrix(cmap), 0.0, "made-up")


@pytest.mark.parametrize("scope", ColumnIndexMap.SCOPES)
@pytest.mark.parametrize("shape", [(1, 2), (3, 2), (3, 3), (5, 3)])
def test_nullspace_every_family(shape, scope):
    inst, cmap = make(*shape, scope=scope)
    rep = verify_nullspace(all_constraints(cmap), inst, n_samples=50, tol=1e-9, seed=3)
    assert rep.passed, rep.max_violation
    assert set(rep.max_violation) <= set(FAMILIES)


def test_nullspace_with_two_measurements_per_step():
    _, _, inst = generate_scenario(SimParams(2, 3, meas_per_step=2, seed=4))
    rep = verify_nullspace(all_constraints(ColumnIndexMap(inst)), inst, n_samples=30)
    assert rep.passed, rep.max_violation


def test_empty_list_passes_vacuously():
    inst, _ = make()
    rep = verify_nullspace([], inst)
    assert rep.passed and rep.worst == 0.0


def test_corrupted_constraint_detected():
    inst, cmap = make()
    cons = initial_constraints(cmap)
    bad = cons[5]
    (i, j), v = next(iter(bad.A.entries.items()))
    bad.A.entries[(i, j)] = v + 1e-3
    rep = verify_nullspace(cons, inst, n_samples=50)
    assert not rep.passed
    assert rep.max_violation[bad.family] > 1e-5


def test_scaled_rotation_breaks_unit_norm(rng):
    inst, cmap = make()
    fp, _, _ = random_feasible_point(inst, cmap, rng)
    X = fp.X.copy()
    c1, c2, _ = pose_cols(1)
    X[:, cmap[c1]] *= 2.0
    unit = [c for c in initial_constraints(cmap)
            if c.family == "orthonormality" and set(c.A.support()) == {c1, "h1"}]
    assert len(unit) == 1
    assert unit[0].residual(X.T @ X) == pytest.approx(3.0)


def test_two_active_thetas_break_product(rng):
    inst, cmap = make(1, 2)
    traj = random_trajectory(1, rng)
    fp = build_feasible_point(traj, AssociationAssignment({(0, 0): 0}), 1, cmap)
    X = fp.X.copy()
    for name in cmap.local_cols(1):
        X[:, cmap[cmap.lifted(1, name)]] = X[:, cmap[name]]
    prod = [c for c in discrete_constraints(cmap) if c.family == "discrete-product"]
    assert prod[0].residual(X.T @ X) == pytest.approx(1.0)


def test_corrupted_lifted_block_breaks_moment(rng):
    inst, cmap = make()
    fp, _, theta = random_feasible_point(inst, cmap, rng)
    t = next(t for t in range(cmap.n_theta)
             if theta[cmap.meas_keys[cmap.theta_meas[t]]] == cmap.theta_landmark[t])
    X = fp.X.copy()
    X[:, cmap[cmap.lifted(t, cmap.lifted_sources(t)[2])]] += 0.5
    worst = max(abs(c.residual(X.T @ X)) for c in moment_constraints(cmap) if c.family == "moment-1")
    assert worst > 0.1


def test_dense_theta_block_breaks_column_structure(rng):
    inst, cmap = make()
    fp, _, theta = random_feasible_point(inst, cmap, rng)
    X = fp.X.copy()
    X[:, cmap["th0_1"]] = [0.7, 0.7]
    worst = max(abs(c.residual(X.T @ X)) for c in column_structure_constraints(cmap))
    assert worst > 0.1


def test_theta_scaled_constraints_at_zero_and_one(rng):
    inst, cmap = make(1, 2)
    traj = random_trajectory(1, rng)
    fp = build_feasible_point(traj, AssociationAssignment({(0, 0): 0}), 1, cmap)
    G = fp.gram()
    scaled = [c for c in combined_constraints(cmap) if c.family == "combined-theta-scaled"]
    assert scaled and np.allclose(residuals(scaled, G), 0.0, atol=1e-12)
    off = [c for c in scaled if "th1_1" in c.A.support() or "th1*c0_1" in c.A.support()]
    # theta = 0: every entry the constraint touches on the lifted side is zero
    for c in off:
        lifted = [cmap[n] for n in c.A.support() if n.startswith("th1")]
        assert np.allclose(fp.X[:, lifted], 0.0)


def test_closure_counts_are_deterministic():
    _, a = make(3, 2, seed=1)
    _, b = make(3, 2, seed=2)
    assert len(closure_constraints(a)) == len(closure_constraints(b))


@given(st.integers(0, 2**31 - 1))
def test_nullspace_property_random_points(seed):
    inst, cmap = make(3, 2, seed=seed % 50)
    rng = np.random.default_rng(seed)
    cons = all_constraints(cmap)
    fp, _, _ = random_feasible_point(inst, cmap, rng)
    assert np.max(np.abs(residuals(cons, fp.gram()))) < 1e-9


def test_nullspace_suite_runtime():
    inst, cmap = make(3, 2)
    t0 = time.perf_counter()
    rep = verify_nullspace(all_constraints(cmap), inst, n_samples=100, tol=1e-9)
    assert rep.passed
    assert time.perf_counter() - t0 < 10.0
