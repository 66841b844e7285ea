"""Command line entry point: ``udaloc {simulate,dataset,solve-one,verify-constraints}``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

from . import harness
from .constraints import all_constraints, verify_nullspace
from .dataset import InsufficientDataError, RawLog, SubsequenceSpec, SyntheticLogParams, extract_subsequences, synthetic_log
from .lifting import ColumnIndexMap
from .local_solver import gauss_newton
from .problem import ProblemInstance, dead_reckon, evaluate_cost
from .sdp import SolverOptions, build_sdp, solve_instance
from .simulate import PAPER_GRID, SimParams, generate_scenario


def _floats(s: str) -> List[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> List[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _solver_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--backend", default="clarabel", choices=["clarabel", "cvxopt"])
    g.add_argument("--tol", type=float, default=1e-10, help="gap and feasibility tolerance")
    g.add_argument("--max-iter", type=int, default=200)
    g.add_argument("--time-limit", type=float, default=math.inf)
    g.add_argument("--threshold", type=float, default=1e6, help="eigenvalue-ratio tightness threshold")


def _solver_options(a) -> SolverOptions:
    return SolverOptions(backend=a.backend, tol_gap_abs=a.tol, tol_gap_rel=a.tol, tol_feas=a.tol,
                         max_iter=a.max_iter, time_limit=a.time_limit)


def _finish(records, config, out_dir) -> int:
    paths = harness.emit_report(records, out_dir, config)
    checks = harness.acceptance_checks(records, config.kind)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    print(f"wrote {len(records)} records to {paths['trials']}")
    return 0 if all(c.passed for c in checks) else 1


def cmd_simulate(a) -> int:
    if a.config:
        config = harness.RunConfig.from_dict(json.loads(Path(a.config).read_text()))
    else:
        grid = {k: list(v) for k, v in PAPER_GRID.items()}
        if not a.paper_grid:
            grid = {"n_poses": a.n_poses, "n_landmarks": a.n_landmarks,
                    "noise_scale": a.noise, "sigma2_landmark": a.sigma2}
        config = harness.RunConfig(kind="simulation", grid=grid, trials=a.trials, seed=a.seed,
                                   threshold=a.threshold, solver=_solver_options(a),
                                   out_dir=a.out, score_against=a.score_against, workers=a.workers)
    records = harness.run_experiment(config)
    return _finish(records, config, a.out or config.out_dir or "results")


def cmd_dataset(a) -> int:
    log_dir = a.log
    if a.synthetic:
        raw = synthetic_log(SyntheticLogParams(n_steps=a.synthetic, seed=a.seed))
        raw.save(a.log)
    config = harness.RunConfig(kind="dataset", grid={"n_poses": a.n_poses, "n_landmarks": a.n_landmarks,
                                                     "dt": a.dt},
                               trials=1, seed=a.seed, threshold=a.threshold, solver=_solver_options(a),
                               out_dir=a.out, score_against="truth", log_dir=log_dir, workers=a.workers)
    try:
        records = harness.run_experiment(config)
    except InsufficientDataError as e:
        print(f"log too short to estimate noise: {e}", file=sys.stderr)
        return 1
    if not records:
        print("no subsequences fit in the log", file=sys.stderr)
        return 1
    return _finish(records, config, a.out)


def cmd_solve_one(a) -> int:
    truth = None
    if a.instance:
        inst = ProblemInstance.load(a.instance)
    else:
        truth, assoc, inst = generate_scenario(SimParams(a.n_poses, a.n_landmarks, a.noise, a.sigma2,
                                                         seed=a.seed))
        if a.save_instance:
            inst.save(a.save_instance)
    opts = _solver_options(a)
    if a.export:
        problem, _ = build_sdp(inst, opts)
        with open(a.export, "w") as fh:
            problem.export(fh)
    out = solve_instance(inst, opts, a.threshold)
    report = {"status": out.solution.status, "n_x": out.problem.dimension,
              "n_constraints": len(out.problem.constraints),
              "sdp_objective": out.solution.primal_objective,
              "solve_time": out.solution.solve_time}
    ok = out.solution.ok
    if out.extracted is not None:
        ex = out.extracted
        report.update({
            "tight": ex.certificate.tight, "eig_ratio": ex.certificate.eig_ratio,
            "so2_feasible": ex.certificate.so2_feasible, "rounded": ex.rounded,
            "cost": evaluate_cost(inst, ex.trajectory, ex.associations),
            "associations": ex.associations.to_list(),
            "trajectory": [[T.pos[0], T.pos[1], T.rot.angle] for T in ex.trajectory],
        })
    dr = gauss_newton(inst, dead_reckon(inst))
    report["maxmix_dr_cost"] = dr.cost
    if truth is not None:
        report["true_associations"] = assoc.to_list()
    print(json.dumps(report, indent=2, default=float))
    return 0 if ok else 1


def cmd_verify(a) -> int:
    _, _, inst = generate_scenario(SimParams(a.n_poses, a.n_landmarks, seed=a.seed))
    cmap = ColumnIndexMap(inst, a.scope)
    cons = all_constraints(cmap)
    rep = verify_nullspace(cons, inst, n_samples=a.samples, tol=a.tol, seed=a.seed)
    for fam, v in sorted(rep.max_violation.items()):
        print(f"{fam:24s} max |<A, X^T X> - b| = {v:.3e}")
    print(f"{len(cons)} constraints, n_x = {cmap.n_x}: {'PASS' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udaloc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="Monte Carlo simulation grid")
    s.add_argument("--n-poses", type=_ints, default=[3])
    s.add_argument("--n-landmarks", type=_ints, default=[2])
    s.add_argument("--noise", type=_floats, default=[0.1])
    s.add_argument("--sigma2", type=_floats, default=[0.5])
    s.add_argument("--paper-grid", action="store_true", help="full 1920-trial grid")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--score-against", default="maxmix-gt", choices=["maxmix-gt", "truth"])
    s.add_argument("--config", help="JSON run configuration (overrides grid flags)")
    s.add_argument("--out", default="results/simulation")
    _solver_args(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("dataset", help="run on a converted log directory")
    d.add_argument("--log", required=True)
    d.add_argument("--synthetic", type=int, default=0, metavar="STEPS",
                   help="first write a synthetic log with this many steps into --log")
    d.add_argument("--n-poses", type=_ints, default=[3, 4, 5])
    d.add_argument("--n-landmarks", type=_ints, default=[2])
    d.add_argument("--dt", type=_floats, default=[20.0])
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--out", default="results/dataset")
    _solver_args(d)
    d.set_defaults(func=cmd_dataset)

    o = sub.add_parser("solve-one", help="solve a single instance and print a JSON summary")
    o.add_argument("--instance", help="ProblemInstance JSON file")
    o.add_argument("--n-poses", type=int, default=3)
    o.add_argument("--n-landmarks", type=int, default=2)
    o.add_argument("--noise", type=float, default=0.1)
    o.add_argument("--sigma2", type=float, default=0.5)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--save-instance")
    o.add_argument("--export", help="write the SDP data in sparse text form")
    _solver_args(o)
    o.set_defaults(func=cmd_solve_one)

    v = sub.add_parser("verify-constraints", help="check constraints on random feasible points")
    v.add_argument("--n-poses", type=int, default=3)
    v.add_argument("--n-landmarks", type=int, default=2)
    v.add_argument("--samples", type=int, default=100)
    v.add_argument("--tol", type=float, default=1e-9)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--scope", default="neighbors", choices=list(ColumnIndexMap.SCOPES))
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
