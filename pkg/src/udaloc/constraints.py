"""Constraint catalogue for the lifted variable and a feasible-point verifier.

Every constraint is ``<A, Z> = b`` with ``A`` symmetric. Only the homogenization
constraint has a non-zero right-hand side. Families:

``homogenization``       ``H^T H = I``
``orthonormality``       columns of each ``C_i`` (and each ``theta C_i``) orthonormal
``dcm-structure``        ``C_i = [[c, -s], [s, c]]``
``discrete-*``           sum / boolean / pairwise product / premultiplied sum on theta
``combined-*``           discrete constraints times column products, and continuous
                         constraints premultiplied by theta
``moment-1..3``          equal Gram entries that represent the same monomial
``column-structure``     diagonal structure of the ``theta * I`` blocks
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Pose2, Rotation2, Trajectory
from .lifting import H_COLS, ColumnIndexMap, SymmetricMatrix, pose_cols
from .problem import AssociationAssignment, ProblemInstance

log = logging.getLogger(__name__)

FAMILIES = (
    "homogenization", "orthonormality", "dcm-structure",
    "discrete-sum", "discrete-boolean", "discrete-product", "discrete-premul-sum",
    "combined-theta-scaled", "combined-cross-product",
    "moment-1", "moment-2", "moment-3", "column-structure",
)

Entry = Tuple[str, str, float]


@dataclass
class ConstraintMatrix:
    A: SymmetricMatrix
    rhs: float
    family: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown constraint family {self.family!r}")

    def residual(self, Z: np.ndarray) -> float:
        return self.A.inner(Z) - self.rhs


def _make(cmap: ColumnIndexMap, family: str, entries: Iterable[Entry], rhs: float = 0.0):
    A = SymmetricMatrix(cmap)
    for a, b, v in entries:
        A.add(a, b, v)
    if not A.entries:
        return None
    return ConstraintMatrix(A, rhs, family)


# ---------------------------------------------------------------------------
# continuous constraints as entry lists over (H, Xi); reused by the theta-scaled family


def _h_constraints() -> List[Entry]:
    # rhs-zero parts of H^T H = I (the rhs-one part is the homogenization row)
    return [
        [("h2", "h2", 1.0), ("h1", "h1", -1.0)],
        [("h1", "h2", 1.0)],
    ]


def _orthonormality(c1: str, c2: str) -> List[List[Entry]]:
    return [
        [(c1, c2, 1.0)],
        [(c1, c1, 1.0), ("h1", "h1", -1.0)],
        [(c2, c2, 1.0), ("h2", "h2", -1.0)],
    ]


def _dcm_structure(c1: str, c2: str) -> List[List[Entry]]:
    # C[0,0] == C[1,1] and C[1,0] == -C[0,1]
    return [
        [(c1, "h1", 1.0), (c2, "h2", -1.0)],
        [(c1, "h2", 1.0), (c2, "h1", 1.0)],
    ]


def initial_constraints(cmap: ColumnIndexMap) -> List[ConstraintMatrix]:
    out = [_make(cmap, "homogenization", [("h1", "h1", 1.0)], rhs=1.0)]
    out += [_make(cmap, "homogenization", e) for e in _h_constraints()]
    for i in range(cmap.n_poses):
        c1, c2, _ = pose_cols(i)
        out += [_make(cmap, "orthonormality", e) for e in _orthonormality(c1, c2)]
        out += [_make(cmap, "dcm-structure", e) for e in _dcm_structure(c1, c2)]
    # lifted rotation blocks: theta C is theta times an orthonormal matrix
    for t in range(cmap.n_theta):
        c1, c2, _ = pose_cols(cmap.theta_timestep[t])
        l1, l2 = cmap.lifted(t, c1), cmap.lifted(t, c2)
        th1, th2 = cmap.theta_cols(t)
        out += [
            _make(cmap, "orthonormality", [(l1, l2, 1.0)]),
            _make(cmap, "orthonormality", [(l1, l1, 1.0), (th1, th1, -1.0)]),
            _make(cmap, "orthonormality", [(l2, l2, 1.0), (th2, th2, -1.0)]),
        ]
    return out


# ---------------------------------------------------------------------------
# discrete constraints, expressed on theta_tilde = [1, theta] index space
# index 0 stands for the constant 1 and t+1 for theta_t


def _discrete_forms(cmap: ColumnIndexMap) -> Dict[str, List[Dict[Tuple[int, int], float]]]:
    forms: Dict[str, List[Dict[Tuple[int, int], float]]] = defaultdict(list)
    for grp in cmap.groups:
        s = {(0, 0): -1.0}
        for t in grp:
            s[(0, t + 1)] = 1.0
        forms["discrete-sum"].append(s)
        for t in grp:
            forms["discrete-boolean"].append({(t + 1, t + 1): 1.0, (0, t + 1): -1.0})
        for a, t in enumerate(grp):
            for u in grp[a + 1:]:
                forms["discrete-product"].append({(t + 1, u + 1): 1.0})
    # premultiplied sum across different measurements of the same timestep
    by_time: Dict[int, List[int]] = defaultdict(list)
    for mi, grp in enumerate(cmap.groups):
        by_time[cmap.theta_timestep[grp[0]]].append(mi)
    for mis in by_time.values():
        for m1 in mis:
            for m2 in mis:
                if m1 == m2:
                    continue
                for t2 in cmap.groups[m2]:
                    f = {(t2 + 1, 0): -1.0}
                    for t1 in cmap.groups[m1]:
                        f[(t2 + 1, t1 + 1)] = 1.0
                    forms["discrete-premul-sum"].append(f)
    return forms


def _tilde_col(cmap: ColumnIndexMap, idx: int, xi: str) -> str:
    """Column holding ``theta_tilde[idx] * xi``."""
    return xi if idx == 0 else cmap.lifted(idx - 1, xi)


def discrete_constraints(cmap: ColumnIndexMap) -> List[ConstraintMatrix]:
    out = []
    for family, forms in _discrete_forms(cmap).items():
        for f in forms:
            entries = [(_tilde_col(cmap, a, "h1"), _tilde_col(cmap, b, "h1"), v)
                       for (a, b), v in f.items()]
            out.append(_make(cmap, family, entries))
    return out


# ---------------------------------------------------------------------------


def _group_cols(cmap: ColumnIndexMap, grp: Sequence[int]) -> Tuple[str, ...]:
    return cmap.local_cols(grp[0])


def combined_constraints(cmap: ColumnIndexMap, include_sum: bool = True) -> List[ConstraintMatrix]:
    """Cross products of discrete constraints with column pairs, and theta-scaled
    continuous constraints. Restricted to columns of the measurement's own timestep."""
    out = []
    forms = _discrete_forms(cmap)
    use = ["discrete-boolean", "discrete-product"] + (["discrete-sum"] if include_sum else [])
    by_group: Dict[int, List[Dict]] = defaultdict(list)
    for fam in use:
        for f in forms[fam]:
            ts = {i - 1 for key in f for i in key if i > 0}
            by_group[cmap.theta_meas[min(ts)]].append(f)
    for mi, grp in enumerate(cmap.groups):
        cols = _group_cols(cmap, grp)
        for f in by_group[mi]:
            for xk in cols:
                for xl in cols:
                    entries = [(_tilde_col(cmap, a, xk), _tilde_col(cmap, b, xl), v)
                               for (a, b), v in f.items()]
                    out.append(_make(cmap, "combined-cross-product", entries))

    # theta-scaled continuous constraints: H-H -> (h, Theta), H-xi -> (h, theta xi),
    # xi-xi -> (theta xi, theta xi)
    for t in range(cmap.n_theta):
        c1, c2, _ = pose_cols(cmap.theta_timestep[t])
        base = _h_constraints() + _orthonormality(c1, c2) + _dcm_structure(c1, c2)
        for e in base:
            scaled = []
            for a, b, v in e:
                ha, hb = a in H_COLS, b in H_COLS
                if ha and hb:
                    scaled.append((a, cmap.lifted(t, b), v))
                elif ha:
                    scaled.append((a, cmap.lifted(t, b), v))
                elif hb:
                    scaled.append((b, cmap.lifted(t, a), v))
                else:
                    scaled.append((cmap.lifted(t, a), cmap.lifted(t, b), v))
            out.append(_make(cmap, "combined-theta-scaled", scaled))
    return out


def moment_constraints(cmap: ColumnIndexMap) -> List[ConstraintMatrix]:
    out = []
    for t in range(cmap.n_theta):
        xis = cmap.lifted_sources(t)
        th = cmap.theta_cols(t)
        # form 1: H and Theta exchange roles, Z[h_a, theta xi] = Z[Theta_a, xi]
        for a in range(2):
            for xi in xis:
                out.append(_make(cmap, "moment-1",
                                 [(H_COLS[a], cmap.lifted(t, xi), 1.0), (th[a], xi, -1.0)]))
        # form 2: Theta columns against lifted columns
        for a in range(2):
            for xi in xis:
                out.append(_make(cmap, "moment-2",
                                 [(cmap.lifted(t, xi), th[a], 1.0),
                                  (H_COLS[a], cmap.lifted(t, xi), -1.0)]))
        l1, l2 = cmap.lifted(t, xis[0]), cmap.lifted(t, xis[1])
        out.append(_make(cmap, "moment-2", [(l1, th[0], 1.0), (l2, th[1], -1.0)]))
        out.append(_make(cmap, "moment-2", [(l1, th[1], 1.0), (l2, th[0], 1.0)]))
        # form 3: pairs of lifted columns
        for p, xp in enumerate(xis):
            for xq in xis[p:]:
                lp, lq = cmap.lifted(t, xp), cmap.lifted(t, xq)
                out.append(_make(cmap, "moment-3", [(lp, lq, 1.0), (xp, lq, -1.0)]))
                if xp != xq:
                    out.append(_make(cmap, "moment-3", [(xp, lq, 1.0), (lp, xq, -1.0)]))
    return out


def column_structure_constraints(cmap: ColumnIndexMap) -> List[ConstraintMatrix]:
    out = []
    n = cmap.n_theta
    for t in range(n):
        a1, a2 = cmap.theta_cols(t)
        for u in range(t + 1, n):
            b1, b2 = cmap.theta_cols(u)
            out.append(_make(cmap, "column-structure", [(a1, b2, 1.0)]))
            out.append(_make(cmap, "column-structure", [(a2, b1, 1.0)]))
    for t in range(n):
        a1, a2 = cmap.theta_cols(t)
        out.append(_make(cmap, "column-structure", [(a1, a2, 1.0)]))
        out.append(_make(cmap, "column-structure", [(a1, a1, 1.0), (a2, a2, -1.0)]))
    return out


# ---------------------------------------------------------------------------
# monomial closure: every Gram entry is theta_S * (x . y) for a set S of
# association variables and two continuous columns x, y. Entries sharing that
# monomial are tied, vanishing monomials are zeroed, and the continuous and
# sum identities are applied under every theta_S that has representatives.

_ZERO = "zero"
MonomialKey = Tuple[Tuple[int, ...], Tuple[str, str]]


def _monomial_key(cmap: ColumnIndexMap, p: str, q: str):
    tp, x = cmap.factors[p]
    tq, y = cmap.factors[q]
    thetas = {t for t in (tp, tq) if t is not None}
    if len(thetas) == 2 and cmap.theta_meas[tp] == cmap.theta_meas[tq]:
        return _ZERO
    return (tuple(sorted(thetas)), tuple(sorted((x, y))))


def monomial_table(cmap: ColumnIndexMap) -> Tuple[Dict[MonomialKey, List[Tuple[str, str]]],
                                                  List[Tuple[str, str]]]:
    """Gram entries grouped by monomial, plus the entries that vanish identically."""
    table: Dict[MonomialKey, List[Tuple[str, str]]] = defaultdict(list)
    zeros = []
    names = cmap.names
    for a in range(len(names)):
        for b in range(a, len(names)):
            key = _monomial_key(cmap, names[a], names[b])
            if key == _ZERO:
                zeros.append((names[a], names[b]))
            else:
                table[key].append((names[a], names[b]))
    return table, zeros


def _rotation_blocks(cmap: ColumnIndexMap) -> List[Tuple[str, str]]:
    return [H_COLS] + [pose_cols(i)[:2] for i in range(cmap.n_poses)]


def _continuous_identities(cmap: ColumnIndexMap) -> List[Tuple[str, List[Entry]]]:
    """Quadratic identities among H and the rotation columns, tagged by family."""
    pair = lambda x, y: tuple(sorted((x, y)))
    out = []
    blocks = _rotation_blocks(cmap)
    for u, (u1, u2) in enumerate(blocks):
        fam = "homogenization" if u == 0 else "orthonormality"
        out.append((fam, [(*pair(u1, u2), 1.0)]))
        out.append((fam, [(*pair(u1, u1), 1.0), (*pair(u2, u2), -1.0)]))
        if u > 0:
            out.append((fam, [(*pair(u1, u1), 1.0), ("h1", "h1", -1.0)]))
        for v1, v2 in blocks[u + 1:]:
            # U^T V is a rotation
            out.append(("dcm-structure", [(*pair(u1, v1), 1.0), (*pair(u2, v2), -1.0)]))
            out.append(("dcm-structure", [(*pair(u1, v2), 1.0), (*pair(u2, v1), 1.0)]))
    return out


def closure_constraints(cmap: ColumnIndexMap) -> List[ConstraintMatrix]:
    table, zeros = monomial_table(cmap)
    rep = {key: entries[0] for key, entries in table.items()}
    theta_cols = {c for t in range(cmap.n_theta) for c in cmap.theta_cols(t)}
    out: List[ConstraintMatrix] = []

    for key, entries in table.items():
        thetas, (x, y) = key
        if len(thetas) == 2:
            fam = "moment-2"
        elif x in H_COLS or y in H_COLS:
            fam = "moment-1"
        else:
            fam = "moment-3"
        p0, q0 = entries[0]
        for p, q in entries[1:]:
            out.append(_make(cmap, fam, [(p0, q0, 1.0), (p, q, -1.0)]))

    for p, q in zeros:
        fam = "discrete-product" if p in theta_cols and q in theta_cols else "combined-cross-product"
        out.append(_make(cmap, fam, [(p, q, 1.0)]))

    theta_sets = sorted({k[0] for k in table})
    identities = _continuous_identities(cmap)
    for S in theta_sets:
        for fam, terms in identities:
            keys = [(S, (x, y)) for x, y, _ in terms]
            if not all(k in rep for k in keys):
                continue
            entries = [(*rep[k], v) for k, (_, _, v) in zip(keys, terms)]
            if S:
                on_theta = all(p in theta_cols and q in theta_cols for p, q, _ in entries)
                fam = "column-structure" if on_theta else "combined-theta-scaled"
            out.append(_make(cmap, fam, entries))

    # sum over a measurement's candidates: sum_u theta_u theta_S xy = theta_S xy
    for grp in cmap.groups:
        members = set(grp)
        for (S, xy) in list(table):
            if members & set(S):
                continue
            lifted = [(tuple(sorted(S + (u,))), xy) for u in grp]
            if not all(k in rep for k in lifted):
                continue
            h_only = xy[0] in H_COLS and xy[1] in H_COLS
            if h_only:
                fam = "discrete-premul-sum" if S else "discrete-sum"
            else:
                fam = "combined-cross-product"
            entries = [(*rep[k], 1.0) for k in lifted] + [(*rep[(S, xy)], -1.0)]
            out.append(_make(cmap, fam, entries))
    return out


def deduplicate(constraints: Iterable[Optional[ConstraintMatrix]]) -> List[ConstraintMatrix]:
    """Drop empty and exactly repeated constraints (same entries and rhs), keeping order."""
    seen = set()
    out = []
    for c in constraints:
        if c is None:
            continue
        key = (c.A.frozen(), c.rhs)
        if key in seen:
            continue
        seen.add(key)
        out.append(c)
    return out


def all_constraints(cmap: ColumnIndexMap, closure: bool = True) -> List[ConstraintMatrix]:
    cons = (initial_constraints(cmap) + discrete_constraints(cmap)
            + combined_constraints(cmap) + moment_constraints(cmap)
            + column_structure_constraints(cmap))
    if closure:
        cons += closure_constraints(cmap)
    return deduplicate(cons)


def independent_subset(constraints: Sequence[ConstraintMatrix], tol: float = 1e-9
                       ) -> List[ConstraintMatrix]:
    """Greedy linearly independent subset, in order, of the affine constraints.

    Sparse Gaussian elimination on the vectorized ``(A, b)`` rows; the rows are
    very sparse so fill-in stays small. Interior-point solvers converge to
    noticeably higher accuracy without the dependent rows.
    """
    rhs_key = (-1, -1)
    basis: Dict[Tuple[int, int], Dict[Tuple[int, int], float]] = {}
    keep = []
    for c in constraints:
        v = {k: (a if k[0] == k[1] else 2.0 * a) for k, a in c.A.entries.items()}
        if c.rhs:
            v[rhs_key] = -c.rhs
        while True:
            pivots = [k for k in v if k in basis]
            if not pivots:
                break
            p = pivots[0]
            row = basis[p]
            f = v[p] / row[p]
            for k, a in row.items():
                nv = v.get(k, 0.0) - f * a
                if abs(nv) < 1e-13:
                    v.pop(k, None)
                else:
                    v[k] = nv
        v = {k: a for k, a in v.items() if abs(a) > tol}
        if not v or set(v) == {rhs_key}:
            continue
        p = max((k for k in v if k != rhs_key), key=lambda k: abs(v[k]))
        basis[p] = v
        keep.append(c)
    return keep


def constraint_rank(constraints: Sequence[ConstraintMatrix]) -> int:
    """Numerical rank of the stacked vectorized constraint matrices."""
    if not constraints:
        return 0
    n = constraints[0].A.n
    rows = np.zeros((len(constraints), n * (n + 1) // 2))
    iu = {}
    k = 0
    for i in range(n):
        for j in range(i, n):
            iu[(i, j)] = k
            k += 1
    for r, c in enumerate(constraints):
        for (i, j), v in c.A.entries.items():
            rows[r, iu[(i, j)]] = v if i == j else np.sqrt(2.0) * v
    return int(np.linalg.matrix_rank(rows))


# ---------------------------------------------------------------------------
# feasible points


@dataclass
class FeasiblePoint:
    X: np.ndarray
    cmap: ColumnIndexMap

    def gram(self) -> np.ndarray:
        return self.X.T @ self.X

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.cmap[name]]


def build_feasible_point(traj: Sequence[Pose2], theta: AssociationAssignment, h_sign: int,
                         cmap: ColumnIndexMap, instance: Optional[ProblemInstance] = None
                         ) -> FeasiblePoint:
    """Realize ``X = H [I, theta (x) I, theta (x) Xi_i, Xi]`` with ``H = h_sign * I``."""
    if h_sign not in (1, -1):
        raise ValueError("h_sign must be +1 or -1")
    X = np.zeros((2, cmap.n_x))
    X[:, cmap["h1"]] = (1.0, 0.0)
    X[:, cmap["h2"]] = (0.0, 1.0)
    for i, T in enumerate(traj):
        C = T.rot.as_matrix()
        c1, c2, r = pose_cols(i)
        X[:, cmap[c1]] = C[:, 0]
        X[:, cmap[c2]] = C[:, 1]
        X[:, cmap[r]] = T.pos
    for t in range(cmap.n_theta):
        key = cmap.meas_keys[cmap.theta_meas[t]]
        val = 1.0 if theta[key] == cmap.theta_landmark[t] else 0.0
        for name in cmap.local_cols(t):
            X[:, cmap[cmap.lifted(t, name)]] = val * X[:, cmap[name]]
    return FeasiblePoint(h_sign * X, cmap)


def random_trajectory(n_poses: int, rng: np.random.Generator, scale: float = 5.0) -> Trajectory:
    return [Pose2(Rotation2.from_angle(rng.uniform(-np.pi, np.pi)), rng.normal(0.0, scale, 2))
            for _ in range(n_poses)]


def random_assignment(instance: ProblemInstance, rng: np.random.Generator) -> AssociationAssignment:
    return AssociationAssignment({m.key: int(rng.choice(m.candidates))
                                  for m in instance.uda_measurements})


def random_feasible_point(instance: ProblemInstance, cmap: ColumnIndexMap,
                          rng: np.random.Generator) -> Tuple[FeasiblePoint, Trajectory,
                                                             AssociationAssignment]:
    traj = random_trajectory(instance.n_poses, rng)
    theta = random_assignment(instance, rng)
    h = 1 if rng.random() < 0.5 else -1
    return build_feasible_point(traj, theta, h, cmap), traj, theta


@dataclass
class NullspaceReport:
    max_violation: Dict[str, float]
    tol: float
    n_samples: int

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.max_violation.values())

    @property
    def worst(self) -> float:
        return max(self.max_violation.values(), default=0.0)


def stack_constraints(constraints: Sequence[ConstraintMatrix]):
    """CSR-like triplet stacking used by the evaluation kernel."""
    ptr = [0]
    rows, cols, vals = [], [], []
    for c in constraints:
        r, cc, v = c.A.coo()
        rows.append(r)
        cols.append(cc)
        # off-diagonal entries appear twice in <A, Z>
        vals.append(np.where(r == cc, v, 2.0 * v))
        ptr.append(ptr[-1] + len(r))
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    return (np.asarray(ptr, dtype=np.int64), cat(rows, np.int64), cat(cols, np.int64),
            cat(vals, np.float64), np.array([c.rhs for c in constraints], dtype=np.float64))


def verify_nullspace(constraints: Sequence[ConstraintMatrix], instance: ProblemInstance,
                     n_samples: int = 100, tol: float = 1e-9, seed: int = 0,
                     cmap: Optional[ColumnIndexMap] = None) -> NullspaceReport:
    """Max ``|<A, X^T X> - b|`` per family over random feasible points."""
    from .kernels import constraint_residuals

    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not constraints:
        return NullspaceReport({}, tol, n_samples)
    cmap = cmap or constraints[0].A.cmap
    rng = np.random.default_rng(seed)
    Xs = np.stack([random_feasible_point(instance, cmap, rng)[0].X for _ in range(n_samples)])
    ptr, rows, cols, vals, rhs = stack_constraints(constraints)
    res = np.abs(constraint_residuals(ptr, rows, cols, vals, rhs, Xs))
    worst = res.max(axis=0)
    report: Dict[str, float] = {}
    for c, w in zip(constraints, worst):
        report[c.family] = max(report.get(c.family, 0.0), float(w))
    return NullspaceReport(report, tol, n_samples)
