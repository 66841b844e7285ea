"""Time the numba kernels against their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Run with UDALOC_DISABLE_NUMBA=1 to confirm the package falls back cleanly;
the numba column is then reported as unavailable.
"""
import argparse
import time

import numpy as np

from udaloc import kernels
from udaloc._accel import HAVE_NUMBA
from udaloc.constraints import all_constraints, random_feasible_point, stack_constraints
from udaloc.lifting import ColumnIndexMap
from udaloc.simulate import SimParams, generate_scenario


def best_of(fn, repeat):
    fn()  # warm-up, triggers compilation for the numba path
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_constraints(repeat):
    _, _, inst = generate_scenario(SimParams(5, 3, seed=0))
    cmap = ColumnIndexMap(inst)
    cons = all_constraints(cmap)
    rng = np.random.default_rng(0)
    Xs = np.stack([random_feasible_point(inst, cmap, rng)[0].X for _ in range(100)])
    args = stack_constraints(cons) + (Xs,)
    ref = kernels.constraint_residuals_numpy(*args)
    out = {"numpy": best_of(lambda: kernels.constraint_residuals_numpy(*args), repeat)}
    if HAVE_NUMBA:
        assert np.allclose(ref, kernels.constraint_residuals_numba(*args), atol=1e-12)
        out["numba"] = best_of(lambda: kernels.constraint_residuals_numba(*args), repeat)
    return f"constraint residuals ({len(cons)} x 100 samples)", out


def bench_maxmix(repeat):
    rng = np.random.default_rng(1)
    n_poses, n_meas, n_lm = 2000, 20000, 50
    ang = rng.uniform(-np.pi, np.pi, n_poses)
    rots = np.stack([[[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]] for a in ang])
    pos = rng.normal(size=(n_poses, 2))
    meas_t = rng.integers(n_poses, size=n_meas)
    ys = rng.normal(size=(n_meas, 2))
    s2 = np.full(n_meas, 0.5)
    cands = kernels.pack_candidates([list(range(n_lm))] * n_meas)
    lms = rng.uniform(0, 10, size=(n_lm, 2))
    args = (rots, pos, meas_t, ys, s2, cands, lms)
    out = {"numpy": best_of(lambda: kernels.min_landmark_residuals_numpy(*args), repeat)}
    if HAVE_NUMBA:
        a = kernels.min_landmark_residuals_numpy(*args)
        b = kernels.min_landmark_residuals_numba(*args)
        assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1])
        out["numba"] = best_of(lambda: kernels.min_landmark_residuals_numba(*args), repeat)
    return f"max-mixture selection ({n_meas} meas x {n_lm} candidates)", out


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=20)
    a = p.parse_args()
    print(f"numba available: {HAVE_NUMBA}")
    for name, res in (bench_constraints(a.repeat), bench_maxmix(a.repeat)):
        nb = res.get("numba")
        line = f"{name:55s} numpy {res['numpy'] * 1e3:9.3f} ms"
        if nb is not None:
            line += f"   numba {nb * 1e3:9.3f} ms   speedup {res['numpy'] / nb:6.2f}x"
        else:
            line += "   numba unavailable"
        print(line)


if __name__ == "__main__":
    main()
