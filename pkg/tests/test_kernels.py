import os
import subprocess
import sys

import numpy as np
import pytest

from udaloc import kernels
from udaloc._accel import HAVE_NUMBA
from udaloc.constraints import all_constraints, random_feasible_point, stack_constraints
from udaloc.lifting import ColumnIndexMap
from udaloc.local_solver import _packed
from udaloc.simulate import SimParams, generate_scenario


@pytest.fixture(scope="module")
def batch():
    _, _, inst = generate_scenario(SimParams(3, 2, seed=1))
    cmap = ColumnIndexMap(inst)
    rng = np.random.default_rng(0)
    Xs = np.stack([random_feasible_point(inst, cmap, rng)[0].X for _ in range(8)])
    Xs[0] += rng.normal(scale=0.1, size=Xs[0].shape)
    return inst, stack_constraints(all_constraints(cmap)), Xs


def test_constraint_residual_kernels_agree(batch):
    _, packed, Xs = batch
    ref = kernels.constraint_residuals_numpy(*packed, Xs)
    assert ref.shape == (8, len(packed[4]))
    assert np.allclose(ref[1:], 0.0, atol=1e-9)
    assert np.abs(ref[0]).max() > 1e-3
    assert np.allclose(kernels.constraint_residuals_numba(*packed, Xs), ref, atol=1e-12)


def test_landmark_kernels_agree(batch):
    inst = batch[0]
    rng = np.random.default_rng(1)
    rots = np.array([[[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]
                     for a in rng.uniform(-3, 3, inst.n_poses)])
    pos = rng.normal(size=(inst.n_poses, 2))
    args = (rots, pos) + _packed(inst) + (inst.landmarks.positions,)
    j1, c1 = kernels.min_landmark_residuals_numpy(*args)
    j2, c2 = kernels.min_landmark_residuals_numba(*args)
    assert np.array_equal(j1, j2) and np.allclose(c1, c2, rtol=1e-13)


def test_ragged_candidates_are_padded():
    packed = kernels.pack_candidates([(0, 2), (1,)])
    assert packed.shape == (2, 2) and packed[1, 1] < 0


def test_disable_flag_selects_numpy():
    code = ("from udaloc import kernels, _accel; "
            "print(_accel.HAVE_NUMBA, kernels.constraint_residuals is kernels.constraint_residuals_numpy)")
    env = dict(os.environ, UDALOC_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not available")
def test_default_uses_numba():
    assert kernels.constraint_residuals is kernels.constraint_residuals_numba
