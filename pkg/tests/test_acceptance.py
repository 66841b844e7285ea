"""Acceptance suite: one test per criterion, reported in the terminal summary.

Every test records a short ``detail`` string so that the summary shows the
measured numbers next to PASS or FAIL.
"""
import math
import os
import time

import numpy as np
import pytest

from udaloc import harness
from udaloc.constraints import all_constraints, random_feasible_point, verify_nullspace
from udaloc.dataset import (RawLog, SubsequenceSpec, SyntheticLogParams, estimate_noise_params,
                            extract_subsequences, integrate_increment, synthetic_log)
from udaloc.geometry import Pose2, Rotation2, TangentVector2, exp_se2
from udaloc.harness import RunConfig, ate
from udaloc.lifting import ColumnIndexMap, assemble_cost
from udaloc.local_solver import enumerate_oracle, gauss_newton, recover_associations, residuals, retract
from udaloc.problem import evaluate_cost
from udaloc.sdp import solve_instance
from udaloc.simulate import SimParams, generate_scenario

pytestmark = pytest.mark.slow


@pytest.fixture
def detail(record_property):
    return lambda text: record_property("detail", text)


@pytest.mark.criterion(1)
def test_constraint_nullspace(detail):
    _, _, inst = generate_scenario(SimParams(3, 2, seed=0))
    t0 = time.perf_counter()
    cmap = ColumnIndexMap(inst)
    cons = all_constraints(cmap)
    rep = verify_nullspace(cons, inst, n_samples=100, tol=1e-9, seed=0, cmap=cmap)
    elapsed = time.perf_counter() - t0
    worst = max(rep.max_violation.values())
    detail(f"{len(cons)} constraints, worst residual {worst:.2e}, {elapsed:.1f} s")
    assert worst <= 1e-9
    assert elapsed < 10.0


@pytest.mark.criterion(2)
def test_gram_cost_consistency(detail):
    rng = np.random.default_rng(2)
    worst = 0.0
    for shape in ((3, 2), (5, 3)):
        _, _, inst = generate_scenario(SimParams(*shape, seed=2))
        cmap = ColumnIndexMap(inst)
        Q = assemble_cost(inst, cmap).to_dense()
        for _ in range(100):
            fp, traj, theta = random_feasible_point(inst, cmap, rng)
            direct = evaluate_cost(inst, traj, theta)
            worst = max(worst, abs(np.sum(Q * fp.gram()) - direct) / max(abs(direct), 1e-300))
    detail(f"worst relative gap {worst:.2e} over 200 points")
    assert worst <= 1e-9


@pytest.fixture(scope="module")
def low_noise_trials():
    """The 20 seeded trials shared by criteria 3 and 4."""
    t0 = time.perf_counter()
    out = []
    for seed in range(20):
        truth, assoc, inst = generate_scenario(SimParams(3, 2, 0.1, 0.5, seed=seed))
        res = solve_instance(inst)
        o_cost, o_theta, _ = enumerate_oracle(inst, truth)
        gt = gauss_newton(inst, truth)
        out.append((inst, res, o_cost, o_theta, gt.cost))
    return out, time.perf_counter() - t0


@pytest.mark.criterion(3)
def test_oracle_global_optimality(low_noise_trials, detail):
    trials, elapsed = low_noise_trials
    n_tight, worst, mismatched = 0, 0.0, 0
    for inst, res, o_cost, o_theta, _ in trials:
        ex = res.extracted
        if ex is None or not (ex.certificate.tight and ex.certificate.so2_feasible):
            continue
        n_tight += 1
        cost = evaluate_cost(inst, ex.trajectory, ex.associations)
        worst = max(worst, abs(cost - o_cost) / max(abs(o_cost), 1e-12))
        mismatched += ex.associations != o_theta
    frac = n_tight / len(trials)
    detail(f"tight {n_tight}/20, worst relative cost gap {worst:.2e}, "
           f"{mismatched} association mismatches, {elapsed:.0f} s")
    assert worst <= 1e-4 and mismatched == 0
    assert frac >= 0.9
    assert elapsed < 600


@pytest.mark.criterion(4)
def test_lower_bound_soundness(low_noise_trials, detail):
    trials, _ = low_noise_trials
    excess = [res.solution.primal_objective - gt_cost for _, res, _, _, gt_cost in trials]
    detail(f"max (SDP objective - Max-Mix GT cost) = {max(excess):.2e} over 20 trials")
    assert all(np.isfinite(excess))
    assert max(excess) <= 1e-6


@pytest.fixture(scope="module")
def reduced_grid():
    cfg = RunConfig(kind="simulation", trials=10, seed=0,
                    grid={"n_poses": [3], "n_landmarks": [2], "noise_scale": [0.1, 30.0],
                          "sigma2_landmark": [0.5, 4.0]})
    records = harness.run_experiment(cfg)
    cells = {}
    for r in records:
        cells.setdefault((r.noise_scale, r.sigma2_landmark), []).append(r)
    return cells


def _fraction(rows, method, attr):
    vals = [bool(getattr(r, attr)) for r in rows if r.method == method]
    return sum(vals) / len(vals)


@pytest.mark.criterion(5)
def test_tightness_degrades_with_noise(reduced_grid, detail):
    low = _fraction(reduced_grid[(0.1, 0.5)], "sdp", "tight")
    high = _fraction(reduced_grid[(30.0, 4.0)], "sdp", "tight")
    detail(f"tight fraction {low:.1f} at (0.1, 0.5) vs {high:.1f} at (30, 4)")
    assert low > high


@pytest.mark.criterion(6)
def test_sdp_dominates_dead_reckoning_baseline(reduced_grid, detail):
    parts, strict = [], False
    ok = True
    for cell in sorted(reduced_grid):
        sdp = _fraction(reduced_grid[cell], "sdp", "associations_correct")
        dr = _fraction(reduced_grid[cell], "maxmix-dr", "associations_correct")
        parts.append(f"{cell}: {sdp:.1f} vs {dr:.1f}")
        ok &= sdp >= dr
        strict |= cell[0] == 30.0 and sdp > dr
    detail("correct-DA fraction SDP vs Max-Mix DR " + ", ".join(parts))
    assert ok and strict


@pytest.mark.criterion(7)
def test_zero_noise_end_to_end(detail):
    parts, ok = [], True
    for shape in ((3, 2), (3, 3), (5, 2), (5, 3)):
        truth, assoc, inst = generate_scenario(SimParams(*shape, noise_scale=0.0,
                                                         sigma2_landmark=0.0, seed=0))
        ex = solve_instance(inst).extracted
        good = ex is not None and ex.certificate.tight and ex.associations == assoc
        err = ate(ex.trajectory, truth) if ex is not None else math.inf
        ok &= good and err < 1e-6
        parts.append(f"{shape}: tight={good} ATE {err:.1e}")
    detail(", ".join(parts))
    assert ok


@pytest.mark.criterion(8)
def test_desk_scale_runtime(detail):
    limits = {(3, 2): 60.0, (5, 3): 600.0}
    times = {}
    for shape, limit in limits.items():
        _, _, inst = generate_scenario(SimParams(*shape, 0.1, 0.5, seed=0))
        t0 = time.perf_counter()
        res = solve_instance(inst)
        times[shape] = time.perf_counter() - t0
        assert res.solution.ok
    detail(", ".join(f"{s}: {t:.1f} s (limit {limits[s]:.0f} s)" for s, t in times.items()))
    assert all(times[s] <= limits[s] for s in limits)


def _numeric_jacobian(inst, traj, theta, h=1e-6):
    e0, _ = residuals(inst, traj, theta)
    J = np.zeros((len(e0), 3 * len(traj)))
    for k in range(3 * len(traj)):
        d = np.zeros(3 * len(traj))
        d[k] = h
        ep, _ = residuals(inst, retract(traj, d), theta)
        em, _ = residuals(inst, retract(traj, -d), theta)
        J[:, k] = (ep - em) / (2 * h)
    return J


def _clear_of_ties(inst, traj, margin=1e-3):
    L = inst.landmarks.positions
    for m in inst.uda_measurements:
        T = traj[m.timestep]
        r = sorted(np.sum((L[j] - T.pos - T.rot.as_matrix() @ m.y) ** 2) for j in m.candidates)
        if len(r) > 1 and r[1] - r[0] < margin:
            return False
    return True


@pytest.mark.criterion(9)
def test_gauss_newton_gradient_check(detail):
    rng = np.random.default_rng(9)
    worst, checked = 0.0, 0
    while checked < 100:
        _, _, inst = generate_scenario(SimParams(4, 3, 5.0, 1.0, seed=int(rng.integers(1 << 30))))
        traj = [Pose2(Rotation2.from_angle(rng.uniform(-3, 3)), rng.normal(size=2) * 3)
                for _ in range(inst.n_poses)]
        if not _clear_of_ties(inst, traj):
            continue
        theta = recover_associations(inst, traj)
        _, J = residuals(inst, traj, theta)
        Jn = _numeric_jacobian(inst, traj, theta)
        worst = max(worst, np.linalg.norm(J - Jn) / np.linalg.norm(Jn))
        checked += 1
    detail(f"worst relative Jacobian error {worst:.2e} over 100 points")
    assert worst <= 1e-5


@pytest.mark.criterion(10)
def test_dataset_pipeline(detail, tmp_path):
    # integration reproduces the generating increments
    rng = np.random.default_rng(10)
    t = np.cumsum(np.r_[0.0, rng.uniform(0.1, 0.5, 300)])
    v, omega = rng.uniform(0, 2, len(t)), rng.normal(0, 1, len(t))
    raw = RawLog(t, v, omega, [], [], [], [], t, np.zeros((len(t), 2)), np.zeros(len(t)),
                 [1], [[0, 0]])
    worst_int = 0.0
    for a, b in ((0, 300), (7, 8), (50, 171)):
        expected = Pose2.identity()
        for k in range(a, b):
            h = t[k + 1] - t[k]
            expected = expected @ exp_se2(TangentVector2(omega[k] * h, (v[k] * h, 0.0)))
        got = integrate_increment(raw, t[a], t[b])
        worst_int = max(worst_int, np.max(np.abs(got.as_matrix() - expected.as_matrix())))

    # noise estimates on a 1000-step fixture written to and read back from disk
    params = SyntheticLogParams(n_steps=1000, kappa=50.0, sigma2_r=0.1, sigma2_landmark=0.1, seed=11)
    synthetic_log(params).save(tmp_path / "log")
    log = RawLog.load(tmp_path / "log")
    spec = SubsequenceSpec(3, 2, 20.0)
    est = estimate_noise_params(log, spec)
    err_s2 = max(abs(est.sigma2_r / 0.1 - 1), abs(est.sigma2_landmark / 0.1 - 1))
    err_k = abs(est.kappa / 50.0 - 1)

    # end-to-end on the first 3-pose subsequence
    sub = extract_subsequences(log, spec, est)[0]
    ex = solve_instance(sub.instance).extracted
    tight = ex is not None and ex.certificate.tight
    da = ex is not None and ex.associations == sub.associations

    msg = (f"integration error {worst_int:.1e}, sigma2 error {err_s2:.1%}, kappa error {err_k:.1%}, "
           f"subsequence tight={tight} DA-correct={da}")
    liw = os.environ.get("UDALOC_LIW_DIR")
    liw_ok = True
    if liw:
        cfg = RunConfig(kind="dataset", trials=1, log_dir=liw,
                        grid={"n_poses": [3, 4, 5], "n_landmarks": [2], "dt": [20.0]})
        checks = harness.acceptance_checks(harness.run_experiment(cfg), "dataset")
        liw_ok = all(c.passed for c in checks)
        msg += "; LIW " + "; ".join(f"{c.name} {c.detail}" for c in checks)
    detail(msg)
    assert worst_int <= 1e-9
    assert err_s2 <= 0.2 and err_k <= 0.25
    assert tight and da
    assert liw_ok
