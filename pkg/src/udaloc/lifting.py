"""Quadratic-form lifting of the localization cost.

The lifted variable is a ``2 x n_x`` matrix ``X`` whose columns are, in order,

* ``h1, h2``: the homogenization block ``H``;
* ``th{t}_1, th{t}_2``: ``theta_t * I`` for every association variable ``t``;
* ``th{t}*c{i}_1, th{t}*c{i}_2, th{t}*r{i}``: ``theta_t`` times the columns of
  the pose that measurement ``t`` belongs to, followed (with the default
  ``"neighbors"`` scope) by ``th{t}*r{i-1}`` and ``th{t}*r{i+1}`` for the
  positions of the adjacent poses;
* ``c{i}_1, c{i}_2, r{i}``: the rotation columns and position of pose ``i``.

Every cost is written as ``<Q, X^T X>``; entries of the Gram matrix are column
dot products, e.g. ``Z[h_a, c{i}_b] = C_i[a, b]`` when ``H = I``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .problem import PriorMeasurement, ProblemInstance, RelPoseMeasurement

H_COLS = ("h1", "h2")


def pose_cols(i: int) -> Tuple[str, str, str]:
    return (f"c{i}_1", f"c{i}_2", f"r{i}")


class ColumnIndexMap:
    """Registry of the named columns of ``X`` for one problem instance."""

    SCOPES = ("own", "neighbors")

    def __init__(self, instance: ProblemInstance, scope: str = "neighbors"):
        if scope not in self.SCOPES:
            raise ValueError(f"unknown lifting scope {scope!r}")
        self.n_poses = instance.n_poses
        self.scope = scope
        # one entry per association variable: (measurement index, landmark, timestep)
        self.theta_meas: List[int] = []
        self.theta_landmark: List[int] = []
        self.theta_timestep: List[int] = []
        self.groups: List[List[int]] = []
        self.meas_keys: List[Tuple[int, int]] = []
        for mi, m in enumerate(instance.uda_measurements):
            grp = []
            for j in m.candidates:
                grp.append(len(self.theta_meas))
                self.theta_meas.append(mi)
                self.theta_landmark.append(j)
                self.theta_timestep.append(m.timestep)
            self.groups.append(grp)
            self.meas_keys.append(m.key)

        names: List[str] = list(H_COLS)
        for t in range(self.n_theta):
            names += [f"th{t}_1", f"th{t}_2"]
        for t in range(self.n_theta):
            names += [f"th{t}*{c}" for c in self.lifted_sources(t)]
        for i in range(self.n_poses):
            names += list(pose_cols(i))
        self.names: Tuple[str, ...] = tuple(names)
        self.index: Dict[str, int] = {n: k for k, n in enumerate(names)}
        # column -> (theta index or None, continuous column it multiplies)
        self.factors: Dict[str, Tuple[Optional[int], str]] = {}
        for name in names:
            if name.startswith("th"):
                head, _, tail = name.partition("*")
                t = int(head[2:].split("_")[0])
                base = tail if tail else H_COLS[int(head.split("_")[1]) - 1]
                self.factors[name] = (t, base)
            else:
                self.factors[name] = (None, name)
        if len(self.index) != len(names):  # pragma: no cover - construction bug
            raise AssertionError("duplicate column names")

    @property
    def n_theta(self) -> int:
        return len(self.theta_meas)

    @property
    def n_x(self) -> int:
        return len(self.names)

    def __len__(self):
        return self.n_x

    def __getitem__(self, name: str) -> int:
        try:
            return self.index[name]
        except KeyError:
            raise KeyError(f"unknown column {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.index

    @staticmethod
    def full_size(n_poses: int, n_theta: int) -> int:
        """Column count of the unreduced variable (every theta lifts all poses)."""
        return 2 + 2 * n_theta + 3 * n_poses * (n_theta + 1)

    def theta_cols(self, t: int) -> Tuple[str, str]:
        return (f"th{t}_1", f"th{t}_2")

    def lifted(self, t: int, name: str) -> str:
        """Name of the column holding ``theta_t * name``."""
        if name == "h1":
            return f"th{t}_1"
        if name == "h2":
            return f"th{t}_2"
        lifted = f"th{t}*{name}"
        if lifted not in self.index:
            raise KeyError(f"column {name!r} is not lifted by theta {t}")
        return lifted

    def lifted_sources(self, t: int) -> Tuple[str, ...]:
        """Continuous columns that theta ``t`` multiplies (own pose first)."""
        i = self.theta_timestep[t]
        out = pose_cols(i)
        if self.scope == "neighbors":
            out += tuple(f"r{k}" for k in (i - 1, i + 1) if 0 <= k < self.n_poses)
        return out

    def local_cols(self, t: int) -> Tuple[str, ...]:
        """Continuous columns (H and the lifted sources) available for theta ``t``."""
        return H_COLS + self.lifted_sources(t)

    def theta_index(self, meas_index: int, landmark: int) -> int:
        for t in self.groups[meas_index]:
            if self.theta_landmark[t] == landmark:
                return t
        raise KeyError((meas_index, landmark))


class SymmetricMatrix:
    """Sparse symmetric matrix keyed by column index pairs ``(i <= j)``.

    :meth:`add` takes the entry of a possibly non-symmetric matrix and stores
    its symmetrized contribution, so inner products with symmetric ``Z`` are
    preserved.
    """

    def __init__(self, cmap: ColumnIndexMap):
        self.cmap = cmap
        self.entries: Dict[Tuple[int, int], float] = {}

    @property
    def n(self) -> int:
        return self.cmap.n_x

    def add(self, row: str, col: str, value: float) -> None:
        if value == 0.0:
            return
        i, j = self.cmap[row], self.cmap[col]
        if i == j:
            key, v = (i, i), value
        else:
            key, v = (min(i, j), max(i, j)), 0.5 * value
        new = self.entries.get(key, 0.0) + v
        if new == 0.0:
            self.entries.pop(key, None)
        else:
            self.entries[key] = new

    def get(self, row: str, col: str) -> float:
        i, j = self.cmap[row], self.cmap[col]
        return self.entries.get((min(i, j), max(i, j)), 0.0)

    def scaled(self, alpha: float) -> "SymmetricMatrix":
        out = SymmetricMatrix(self.cmap)
        out.entries = {k: alpha * v for k, v in self.entries.items()}
        return out

    def __iter__(self) -> Iterator[Tuple[str, str, float]]:
        names = self.cmap.names
        for (i, j), v in sorted(self.entries.items()):
            yield names[i], names[j], v

    def support(self) -> set:
        out = set()
        for i, j in self.entries:
            out.add(self.cmap.names[i])
            out.add(self.cmap.names[j])
        return out

    def coo(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Upper-triangular triplets ``(rows, cols, vals)`` with ``rows <= cols``."""
        if not self.entries:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        keys = sorted(self.entries)
        r = np.array([k[0] for k in keys], dtype=np.int64)
        c = np.array([k[1] for k in keys], dtype=np.int64)
        v = np.array([self.entries[k] for k in keys])
        return r, c, v

    def to_dense(self) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        for (i, j), v in self.entries.items():
            M[i, j] = v
            M[j, i] = v
        return M

    def to_sparse(self) -> sp.csr_matrix:
        r, c, v = self.coo()
        off = r != c
        rows = np.concatenate([r, c[off]])
        cols = np.concatenate([c, r[off]])
        vals = np.concatenate([v, v[off]])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n, self.n))

    def inner(self, Z: np.ndarray) -> float:
        """``<A, Z>`` for a dense symmetric ``Z``."""
        total = 0.0
        for (i, j), v in self.entries.items():
            total += v * Z[i, j] if i == j else 2.0 * v * Z[i, j]
        return float(total)

    def frozen(self) -> Tuple:
        return tuple(sorted(self.entries.items()))

    def dump(self, fh) -> None:
        for a, b, v in self:
            fh.write(f"{a} {b} {v!r}\n")


@dataclass
class CostBlock:
    """Dense symmetric cost fragment over a named column subset."""

    cols: Tuple[str, ...]
    Q: np.ndarray

    def __post_init__(self):
        self.Q = 0.5 * (self.Q + self.Q.T)
        if self.Q.shape != (len(self.cols), len(self.cols)):
            raise ValueError("block shape does not match column list")

    def entries(self) -> Iterable[Tuple[str, str, float]]:
        """All ordered ``(row, col, value)`` pairs with non-zero value."""
        for a, ra in enumerate(self.cols):
            for b, cb in enumerate(self.cols):
                if self.Q[a, b] != 0.0:
                    yield ra, cb, float(self.Q[a, b])

    def evaluate(self, columns: np.ndarray) -> float:
        """``<Q, M^T M>`` where ``columns`` is the ``2 x len(cols)`` block ``M``."""
        G = columns.T @ columns
        return float(np.sum(self.Q * G))


class _BlockBuilder:
    def __init__(self, cols: Sequence[str]):
        self.cols = tuple(cols)
        self.idx = {c: k for k, c in enumerate(self.cols)}
        self.Q = np.zeros((len(self.cols), len(self.cols)))

    def add(self, a: str, b: str, v: float):
        # upper-triangular style insertion; symmetrized by CostBlock
        self.Q[self.idx[a], self.idx[b]] += v

    def constant(self, v: float):
        self.add("h1", "h1", 0.5 * v)
        self.add("h2", "h2", 0.5 * v)

    def block(self) -> CostBlock:
        return CostBlock(self.cols, self.Q)


def _rotation_prior_terms(b: _BlockBuilder, cols: Sequence[str], R: np.ndarray, weight: float):
    """weight * ||C - R||_F^2 = weight * (4 - 2 <R, C>) for orthonormal C and R."""
    b.constant(4.0 * weight)
    for a in range(2):
        for k in range(2):
            b.add(H_COLS[a], cols[k], -2.0 * weight * R[a, k])


def lift_prior(prior: PriorMeasurement, pose: int = 0) -> CostBlock:
    c1, c2, r = pose_cols(pose)
    b = _BlockBuilder(H_COLS + (c1, c2, r))
    _rotation_prior_terms(b, (c1, c2), prior.rot_check.as_matrix(), prior.kappa_prior)
    w = 1.0 / prior.sigma2_prior
    x = prior.pos_check
    b.constant(w * float(x @ x))
    for a in range(2):
        b.add(H_COLS[a], r, -2.0 * w * x[a])
    b.add(r, r, w)
    return b.block()


def lift_relative_pose(meas: RelPoseMeasurement) -> CostBlock:
    k, n = meas.from_index, meas.to_index
    ck1, ck2, rk = pose_cols(k)
    cn1, cn2, rn = pose_cols(n)
    b = _BlockBuilder(H_COLS + (ck1, ck2, rk, cn1, cn2, rn))
    # rotation: kappa * (4 - 2 <dC, C_k^T C_n>)
    dC = meas.delta_rot.as_matrix()
    b.constant(4.0 * meas.kappa)
    for a, ca in enumerate((ck1, ck2)):
        for c, cc in enumerate((cn1, cn2)):
            b.add(ca, cc, -2.0 * meas.kappa * dC[a, c])
    # translation: ||r_n - r_k - C_k dr||^2 / sigma2
    w = 1.0 / meas.sigma2_pos
    dr = meas.delta_pos
    b.constant(w * float(dr @ dr))
    b.add(rk, rk, w)
    b.add(rn, rn, w)
    b.add(rk, rn, -2.0 * w)
    for a, ca in enumerate((ck1, ck2)):
        b.add(ca, rk, 2.0 * w * dr[a])
        b.add(ca, rn, -2.0 * w * dr[a])
    return b.block()


def lift_known_landmark(ell, y, sigma2: float, pose: int = 0) -> CostBlock:
    """||(ell - r) - C y||^2 / sigma2 as a block over ``(H, C_i, r_i)``."""
    ell = np.asarray(ell, dtype=float)
    y = np.asarray(y, dtype=float)
    c1, c2, r = pose_cols(pose)
    cc = (c1, c2)
    b = _BlockBuilder(H_COLS + (c1, c2, r))
    w = 1.0 / sigma2
    b.constant(w * float(ell @ ell + y @ y))
    b.add(r, r, w)
    for a in range(2):
        b.add(H_COLS[a], r, -2.0 * w * ell[a])
        b.add(cc[a], r, 2.0 * w * y[a])
        for k in range(2):
            b.add(H_COLS[a], cc[k], -2.0 * w * ell[a] * y[k])
    return b.block()


def place_block(Q: SymmetricMatrix, block: CostBlock) -> None:
    for a, c, v in block.entries():
        Q.add(a, c, v)


def place_theta_block(Q: SymmetricMatrix, cmap: ColumnIndexMap, t: int, block: CostBlock) -> None:
    """Insert ``theta_t <Q_b, Xi^T Xi>`` as ``<Q_b, Xi^T (theta_t Xi)>``."""
    for a, c, v in block.entries():
        Q.add(a, cmap.lifted(t, c), v)


def assemble_cost(instance: ProblemInstance, cmap: ColumnIndexMap) -> SymmetricMatrix:
    Q = SymmetricMatrix(cmap)
    place_block(Q, lift_prior(instance.prior, 0))
    for m in instance.odometry:
        place_block(Q, lift_relative_pose(m))
    L = instance.landmarks.positions
    for t in range(cmap.n_theta):
        m = instance.uda_measurements[cmap.theta_meas[t]]
        j = cmap.theta_landmark[t]
        place_theta_block(Q, cmap, t, lift_known_landmark(L[j], m.y, m.sigma2, m.timestep))
    return Q
