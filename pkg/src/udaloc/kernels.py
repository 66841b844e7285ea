"""Hot numeric kernels with numba and pure-numpy implementations.

The public functions dispatch on :data:`udaloc._accel.HAVE_NUMBA`; the
``*_numpy`` and ``*_numba`` variants stay importable so the benchmark can time
both paths side by side.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

# ---------------------------------------------------------------------------
# <A_c, X_s^T X_s> - b_c for a stack of sparse constraints and a batch of X


def constraint_residuals_numpy(ptr, rows, cols, vals, rhs, Xs):
    """Residuals of shape ``(n_samples, n_constraints)``.

    ``vals`` already carries the factor 2 for off-diagonal entries.
    """
    Xs = np.asarray(Xs, dtype=np.float64)
    prod = Xs[:, 0, rows] * Xs[:, 0, cols] + Xs[:, 1, rows] * Xs[:, 1, cols]
    prod *= vals
    if prod.shape[1] == 0:
        return np.zeros((Xs.shape[0], len(rhs))) - rhs
    starts = ptr[:-1]
    out = np.add.reduceat(prod, np.minimum(starts, prod.shape[1] - 1), axis=1)
    out[:, starts == ptr[1:]] = 0.0
    return out - rhs


@njit
def _constraint_residuals_loop(ptr, rows, cols, vals, rhs, Xs):
    n_s = Xs.shape[0]
    n_c = ptr.shape[0] - 1
    out = np.empty((n_s, n_c))
    for s in range(n_s):
        for c in range(n_c):
            acc = 0.0
            for e in range(ptr[c], ptr[c + 1]):
                i = rows[e]
                j = cols[e]
                acc += vals[e] * (Xs[s, 0, i] * Xs[s, 0, j] + Xs[s, 1, i] * Xs[s, 1, j])
            out[s, c] = acc - rhs[c]
    return out


def constraint_residuals_numba(ptr, rows, cols, vals, rhs, Xs):
    return _constraint_residuals_loop(ptr, rows, cols, vals, rhs,
                                      np.ascontiguousarray(Xs, dtype=np.float64))


# ---------------------------------------------------------------------------
# per-measurement minimum landmark residual (max-mixture selection)


def pack_candidates(candidate_lists):
    """Pad candidate lists into an int array sorted ascending, ``-1`` marks padding."""
    width = max((len(c) for c in candidate_lists), default=1)
    out = -np.ones((len(candidate_lists), width), dtype=np.int64)
    for m, c in enumerate(candidate_lists):
        out[m, :len(c)] = sorted(c)
    return out


def min_landmark_residuals_numpy(rots, pos, meas_t, ys, sigma2, cands, landmarks):
    """Best landmark and its residual for every measurement (ties -> smallest index)."""
    C = rots[meas_t]                                  # (M, 2, 2)
    Cy = np.einsum("mab,mb->ma", C, ys)               # (M, 2)
    ell = landmarks[np.maximum(cands, 0)]             # (M, J, 2)
    e = ell - pos[meas_t][:, None, :] - Cy[:, None, :]
    cost = np.einsum("mja,mja->mj", e, e) / sigma2[:, None]
    cost = np.where(cands >= 0, cost, np.inf)
    k = np.argmin(cost, axis=1)
    rowsel = np.arange(len(k))
    return cands[rowsel, k], cost[rowsel, k]


@njit
def _min_landmark_residuals_loop(rots, pos, meas_t, ys, sigma2, cands, landmarks):
    M = meas_t.shape[0]
    best_j = np.empty(M, dtype=np.int64)
    best_c = np.empty(M)
    for m in range(M):
        i = meas_t[m]
        cy0 = rots[i, 0, 0] * ys[m, 0] + rots[i, 0, 1] * ys[m, 1]
        cy1 = rots[i, 1, 0] * ys[m, 0] + rots[i, 1, 1] * ys[m, 1]
        bj = -1
        bc = np.inf
        for k in range(cands.shape[1]):
            j = cands[m, k]
            if j < 0:
                break
            e0 = landmarks[j, 0] - pos[i, 0] - cy0
            e1 = landmarks[j, 1] - pos[i, 1] - cy1
            c = (e0 * e0 + e1 * e1) / sigma2[m]
            if c < bc:
                bc = c
                bj = j
        best_j[m] = bj
        best_c[m] = bc
    return best_j, best_c


def min_landmark_residuals_numba(rots, pos, meas_t, ys, sigma2, cands, landmarks):
    return _min_landmark_residuals_loop(
        np.ascontiguousarray(rots, dtype=np.float64), np.ascontiguousarray(pos, dtype=np.float64),
        np.ascontiguousarray(meas_t, dtype=np.int64), np.ascontiguousarray(ys, dtype=np.float64),
        np.ascontiguousarray(sigma2, dtype=np.float64), np.ascontiguousarray(cands, dtype=np.int64),
        np.ascontiguousarray(landmarks, dtype=np.float64))


if HAVE_NUMBA:
    constraint_residuals = constraint_residuals_numba
    min_landmark_residuals = min_landmark_residuals_numba
else:
    constraint_residuals = constraint_residuals_numpy
    min_landmark_residuals = min_landmark_residuals_numpy
