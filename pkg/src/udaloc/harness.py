"""Monte Carlo driver, metrics and report files."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import RawLog, SubsequenceSpec, extract_subsequences
from .geometry import Trajectory
from .local_solver import GnOptions, gauss_newton
from .problem import AssociationAssignment, ProblemInstance, dead_reckon, evaluate_cost
from .sdp import TIGHTNESS_THRESHOLD, SolverOptions, solve_instance
from .simulate import PAPER_GRID, PAPER_TRIALS_PER_CELL, SimParams, generate_scenario

log = logging.getLogger(__name__)

METHODS = ("sdp", "maxmix-dr", "maxmix-gt")
SIM_KEYS = ("n_poses", "n_landmarks", "noise_scale", "sigma2_landmark")
DATASET_KEYS = ("n_poses", "n_landmarks", "dt")


def ate(est: Sequence, ref: Sequence) -> float:
    """Mean position-error norm over the trajectory."""
    if len(est) != len(ref):
        raise ValueError("trajectories differ in length")
    if not len(est):
        return 0.0
    return float(np.mean([np.linalg.norm(a.pos - b.pos) for a, b in zip(est, ref)]))


def ate_rmse(est: Sequence, ref: Sequence) -> float:
    if len(est) != len(ref):
        raise ValueError("trajectories differ in length")
    if not len(est):
        return 0.0
    return float(math.sqrt(np.mean([np.sum((a.pos - b.pos) ** 2) for a, b in zip(est, ref)])))


def associations_correct(est: AssociationAssignment, ref: AssociationAssignment) -> bool:
    if set(est.keys()) != set(ref.keys()):
        raise ValueError("association domains differ")
    return all(est[k] == ref[k] for k in ref.keys())


@dataclass
class TrialRecord:
    experiment: str
    n_poses: int
    n_landmarks: int
    noise_scale: float
    sigma2_landmark: float
    dt: float
    seed: int
    method: str
    status: str = "ok"
    cost: float = math.nan
    ate: float = math.nan
    ate_rmse: float = math.nan
    associations_correct: bool = False
    tight: bool = False
    eig_ratio: float = math.nan
    so2_feasible: bool = False
    sdp_objective: float = math.nan
    wall_time: float = math.nan
    error: str = ""

    @classmethod
    def header(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def cell(self, kind: str) -> Tuple:
        keys = SIM_KEYS if kind == "simulation" else DATASET_KEYS
        return tuple(getattr(self, k) for k in keys)

    def sort_key(self):
        # NaN never compares, so unused cell fields sort as -inf
        num = lambda x: -math.inf if isinstance(x, float) and math.isnan(x) else x
        return (self.experiment, self.n_poses, self.n_landmarks, num(self.noise_scale),
                num(self.sigma2_landmark), num(self.dt), self.seed, METHODS.index(self.method))


@dataclass
class RunConfig:
    kind: str = "simulation"
    grid: Dict[str, List[float]] = field(default_factory=lambda: {k: list(v) for k, v in PAPER_GRID.items()})
    trials: int = PAPER_TRIALS_PER_CELL
    seed: int = 0
    threshold: float = TIGHTNESS_THRESHOLD
    solver: SolverOptions = field(default_factory=SolverOptions)
    out_dir: Optional[str] = None
    score_against: str = "maxmix-gt"     # or "truth"
    log_dir: Optional[str] = None        # dataset runs
    workers: int = 1

    def __post_init__(self):
        if self.kind not in ("simulation", "dataset"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        keys = SIM_KEYS if self.kind == "simulation" else DATASET_KEYS
        missing = [k for k in keys if not self.grid.get(k)]
        if missing:
            raise ValueError(f"grid is missing values for {missing}")
        if self.trials < 1 and self.kind == "simulation":
            raise ValueError("trials must be positive")
        if self.score_against not in ("maxmix-gt", "truth"):
            raise ValueError("score_against must be 'maxmix-gt' or 'truth'")
        if self.kind == "dataset" and not self.log_dir:
            raise ValueError("dataset runs need log_dir")

    def cells(self) -> List[Tuple]:
        keys = SIM_KEYS if self.kind == "simulation" else DATASET_KEYS
        return list(itertools.product(*(self.grid[k] for k in keys)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solver"] = {k: (None if isinstance(v, float) and math.isinf(v) else v)
                       for k, v in asdict(self.solver).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        solver = dict(d.pop("solver", {}) or {})
        if solver.get("time_limit") is None:
            solver.pop("time_limit", None)
        return cls(solver=SolverOptions(**solver), **d)


def trial_seed(base: int, cell_index: int, trial: int) -> int:
    return int(np.random.SeedSequence((base, cell_index, trial)).generate_state(1)[0])


# ---------------------------------------------------------------------------


def _evaluate_methods(inst: ProblemInstance, truth: Trajectory, true_assoc: AssociationAssignment,
                      base: dict, config: RunConfig) -> List[TrialRecord]:
    gn = GnOptions()
    rows: Dict[str, TrialRecord] = {}
    results = {}

    t0 = time.perf_counter()
    res_gt = gauss_newton(inst, truth, gn)
    results["maxmix-gt"] = (res_gt.trajectory, res_gt.associations, res_gt.cost)
    rows["maxmix-gt"] = TrialRecord(method="maxmix-gt", wall_time=time.perf_counter() - t0, **base)

    t0 = time.perf_counter()
    res_dr = gauss_newton(inst, dead_reckon(inst), gn)
    results["maxmix-dr"] = (res_dr.trajectory, res_dr.associations, res_dr.cost)
    rows["maxmix-dr"] = TrialRecord(method="maxmix-dr", wall_time=time.perf_counter() - t0, **base)

    rec = TrialRecord(method="sdp", **base)
    t0 = time.perf_counter()
    try:
        out = solve_instance(inst, config.solver, config.threshold)
        rec.wall_time = time.perf_counter() - t0
        rec.sdp_objective = out.solution.primal_objective
        if out.extracted is None:
            rec.status = out.solution.status
        else:
            ex = out.extracted
            rec.status = out.solution.status
            rec.tight = ex.certificate.tight
            rec.eig_ratio = ex.certificate.eig_ratio
            rec.so2_feasible = ex.certificate.so2_feasible
            results["sdp"] = (ex.trajectory, ex.associations,
                              evaluate_cost(inst, ex.trajectory, ex.associations))
    except Exception as e:  # recorded, the run continues
        rec.wall_time = time.perf_counter() - t0
        rec.status = "error"
        rec.error = f"{type(e).__name__}: {e}"
        log.warning("sdp failed on %s: %s", base, rec.error)
    rows["sdp"] = rec

    ref_traj = truth if config.score_against == "truth" else res_gt.trajectory
    for name, (traj, assoc, cost) in results.items():
        r = rows[name]
        r.cost = float(cost)
        r.ate = ate(traj, ref_traj)
        r.ate_rmse = ate_rmse(traj, ref_traj)
        r.associations_correct = associations_correct(assoc, true_assoc)
    return [rows[m] for m in METHODS]


def _simulation_trial(args) -> List[TrialRecord]:
    cell, seed, config = args
    n_poses, n_landmarks, noise, s2 = cell
    params = SimParams(int(n_poses), int(n_landmarks), float(noise), float(s2), seed=seed)
    truth, assoc, inst = generate_scenario(params)
    base = dict(experiment="simulation", n_poses=int(n_poses), n_landmarks=int(n_landmarks),
                noise_scale=float(noise), sigma2_landmark=float(s2), dt=math.nan, seed=seed)
    return _evaluate_methods(inst, truth, assoc, base, config)


def _dataset_cell(args) -> List[TrialRecord]:
    cell, config = args
    n_poses, n_landmarks, dt = cell
    raw = RawLog.load(config.log_dir)
    spec = SubsequenceSpec(int(n_poses), int(n_landmarks), float(dt))
    out = []
    for idx, sub in enumerate(extract_subsequences(raw, spec)):
        base = dict(experiment="dataset", n_poses=int(n_poses), n_landmarks=int(n_landmarks),
                    noise_scale=math.nan, sigma2_landmark=sub.instance.uda_measurements[0].sigma2
                    if sub.instance.uda_measurements else math.nan, dt=float(dt), seed=idx)
        out += _evaluate_methods(sub.instance, sub.truth, sub.associations, base, config)
    return out


def run_experiment(config: RunConfig) -> List[TrialRecord]:
    if config.kind == "simulation":
        jobs = [(cell, trial_seed(config.seed, ci, k), config)
                for ci, cell in enumerate(config.cells()) for k in range(config.trials)]
        fn = _simulation_trial
    else:
        jobs = [(cell, config) for cell in config.cells()]
        fn = _dataset_cell
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            chunks = list(pool.map(fn, jobs))
    else:
        chunks = [fn(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=TrialRecord.sort_key)
    return records


# ---------------------------------------------------------------------------
# aggregation and report files


def _median(xs: Iterable[float]) -> float:
    xs = [x for x in xs if not (isinstance(x, float) and math.isnan(x))]
    return float(np.median(xs)) if xs else math.nan


def _mean(xs: Iterable[float]) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else math.nan


def aggregate(records: Sequence[TrialRecord], kind: str) -> Dict[str, Dict[Tuple, Dict[str, float]]]:
    """Per-cell statistics keyed ``stat -> cell -> column -> value``."""
    by_cell: Dict[Tuple, Dict[int, Dict[str, TrialRecord]]] = {}
    for r in records:
        by_cell.setdefault(r.cell(kind), {}).setdefault(r.seed, {})[r.method] = r
    stats: Dict[str, Dict[Tuple, Dict[str, float]]] = {
        "tight_fraction": {}, "da_error_fraction_tight": {}, "da_error_fraction_all": {},
        "median_ate": {}, "median_ate_rmse": {}, "median_wall_time": {}, "median_eig_ratio": {},
    }
    for cell, trials in sorted(by_cell.items()):
        trials = list(trials.values())
        sdp = [t["sdp"] for t in trials if "sdp" in t]
        tight_seeds = [t for t in trials if "sdp" in t and t["sdp"].tight]
        stats["tight_fraction"][cell] = {
            "tight_fraction": float(np.mean([r.tight for r in sdp])) if sdp else math.nan,
            "trials": len(trials)}
        stats["median_eig_ratio"][cell] = {"sdp": _median(r.eig_ratio for r in sdp)}
        for stat, subset in (("da_error_fraction_tight", tight_seeds), ("da_error_fraction_all", trials)):
            stats[stat][cell] = {
                m: _mean(not t[m].associations_correct for t in subset if m in t) for m in METHODS}
            stats[stat][cell]["trials"] = len(subset)
        for stat, attr in (("median_ate", "ate"), ("median_ate_rmse", "ate_rmse"),
                           ("median_wall_time", "wall_time")):
            stats[stat][cell] = {m: _median(getattr(t[m], attr) for t in trials if m in t)
                                 for m in METHODS}
    return stats


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_records(records: Sequence[TrialRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TrialRecord.header())
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in TrialRecord.header()])


def read_records(path: Path) -> List[TrialRecord]:
    types = {f.name: f.type for f in fields(TrialRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                if t in ("int", int):
                    kw[k] = int(v)
                elif t in ("float", float):
                    kw[k] = float(v)
                elif t in ("bool", bool):
                    kw[k] = v == "1"
                else:
                    kw[k] = v
            out.append(TrialRecord(**kw))
    return out


def emit_report(records: Sequence[TrialRecord], out_dir, config: Optional[RunConfig] = None
                ) -> Dict[str, Path]:
    if not records:
        raise ValueError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = records[0].experiment
    keys = SIM_KEYS if kind == "simulation" else DATASET_KEYS
    paths = {"trials": out / "trials.csv"}
    write_records(records, paths["trials"])
    for stat, table in aggregate(records, kind).items():
        cols = sorted({c for row in table.values() for c in row},
                      key=lambda c: (c not in METHODS, METHODS.index(c) if c in METHODS else 0, c))
        p = out / f"{stat}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(keys) + cols)
            for cell, row in table.items():
                w.writerow([_fmt(c) for c in cell] + [_fmt(row.get(c, math.nan)) for c in cols])
        paths[stat] = p
    manifest = {
        "experiment": kind,
        "n_records": len(records),
        "seeds": sorted({r.seed for r in records}),
        "config": config.to_dict() if config else None,
    }
    paths["manifest"] = out / "manifest.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return paths


# ---------------------------------------------------------------------------
# run-level checks that decide the exit status


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def acceptance_checks(records: Sequence[TrialRecord], kind: str) -> List[Check]:
    checks = []
    by_key: Dict[Tuple, Dict[str, TrialRecord]] = {}
    for r in records:
        by_key.setdefault((r.cell(kind), r.seed), {})[r.method] = r
    bad = []
    for key, rows in by_key.items():
        sdp, gt = rows.get("sdp"), rows.get("maxmix-gt")
        if sdp and gt and sdp.tight and not math.isnan(sdp.sdp_objective):
            if sdp.sdp_objective > gt.cost + 1e-6:
                bad.append(key)
    checks.append(Check("sdp-lower-bound", not bad,
                        f"{len(bad)} tight trials with SDP objective above Max-Mix GT"))
    if kind == "dataset":
        five = [rows for (cell, _), rows in by_key.items() if cell[0] == 5]
        if five:
            f_sdp = np.mean([not r["sdp"].associations_correct for r in five])
            f_dr = np.mean([not r["maxmix-dr"].associations_correct for r in five])
            checks.append(Check("dataset-da-ordering", bool(f_sdp <= f_dr),
                                f"SDP DA-failure {f_sdp:.3f} vs Max-Mix DR {f_dr:.3f} at 5 poses"))
    return checks
