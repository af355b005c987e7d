#!/usr/bin/env python3
"""
Explicit MPC / data-driven predictive control from a problem file.

Usage:
    python3 execution/explicit_dpc.py check-data   execution/problems/example1.json
    python3 execution/explicit_dpc.py mpc-explicit execution/problems/example2.json --out-dir .tmp
    python3 execution/explicit_dpc.py dpc-explicit execution/problems/example2.json --out-dir .tmp
    python3 execution/explicit_dpc.py compare      execution/problems/example1.json --samples 1000
    python3 execution/explicit_dpc.py simulate     execution/problems/example2.json --kind dpc --x0 1,0 --steps 30
    python3 execution/explicit_dpc.py example1
    python3 execution/explicit_dpc.py example2

Every run prints a JSON envelope {"success": ..., ...} on stdout.
Exit codes: 0 ok, 1 numerical failure, 2 validation failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

import settings
from condense import (
    DpcRawQP, ParametricQP, RankReport, ReductionMaps, build_dpc_raw, build_reduction_maps,
    condense_mpc, eliminate_equalities, rank_report, reduce_to_beta,
)
from datamat import DataRecord, HankelPartition, is_persistently_exciting, max_excitation_order, partition
from mpqp import CriticalRegion, ExplicitSolution, Polyhedron, evaluate, explicit_solve, sample_parameters
from problem_file import ProblemFile, builtin_problem, load_problem
from verify import (
    CONTROLLER_KINDS, DPC, MPC, Controller, check_congruence, check_kkt_coupling, closed_loop,
    max_constraint_violation, sampled_equivalence,
)

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = os.getenv("DPC_OUT_DIR", ".tmp")
EXIT_NUMERICAL = 1
EXIT_VALIDATION = 2


@dataclass
class DpcPipeline:
    """Everything derived from one data record."""
    data: DataRecord
    part: HankelPartition
    raw: DpcRawQP
    maps: ReductionMaps
    alpha: ParametricQP
    beta: ParametricQP
    ranks: RankReport


def solution_to_dict(sol: ExplicitSolution) -> dict:
    return {
        "n_theta": sol.n_theta,
        "n_z": sol.n_z,
        "n_constraints": sol.n_constraints,
        "s": sol.s,
        "domain": sol.domain.to_dict(),
        "stats": sol.stats,
        "regions": [
            {
                "region_id": i,
                "active_set": list(r.active_set),
                "L": r.L.tolist(),
                "c": r.c.tolist(),
                "A": r.region.A.tolist(),
                "b": r.region.b.tolist(),
                "lambda_gain": r.lambda_gain.tolist(),
                "lambda_offset": r.lambda_offset.tolist(),
            }
            for i, r in enumerate(sol.regions)
        ],
    }


def solution_from_dict(doc: dict) -> ExplicitSolution:
    n_theta, n_z = int(doc["n_theta"]), int(doc["n_z"])
    regions = []
    for r in doc["regions"]:
        active = tuple(int(i) for i in r["active_set"])
        regions.append(CriticalRegion(
            active_set=active,
            L=np.array(r["L"], dtype=float).reshape(n_z, n_theta),
            c=np.array(r["c"], dtype=float).reshape(n_z),
            region=Polyhedron(np.array(r["A"], dtype=float).reshape(-1, n_theta), r["b"]),
            lambda_gain=np.array(r["lambda_gain"], dtype=float).reshape(len(active), n_theta),
            lambda_offset=np.array(r["lambda_offset"], dtype=float).reshape(len(active)),
        ))
    domain = doc["domain"]
    return ExplicitSolution(
        regions=regions,
        n_theta=n_theta,
        n_z=n_z,
        domain=Polyhedron(np.array(domain["A"], dtype=float).reshape(-1, n_theta), domain["b"]),
        n_constraints=int(doc.get("n_constraints", 0)),
        stats=dict(doc.get("stats", {})),
    )


def partition_frame(sol: ExplicitSolution) -> pd.DataFrame:
    """Long table: halfspace rows (last column is b), gain entries and offset entries per region."""
    records = []
    for rid, region in enumerate(sol.regions):
        A, b = region.region.A, region.region.b
        for i in range(A.shape[0]):
            records.extend((rid, "halfspace", i, j, A[i, j]) for j in range(A.shape[1]))
            records.append((rid, "halfspace", i, A.shape[1], b[i]))
        records.extend((rid, "gain", i, j, region.L[i, j])
                       for i in range(region.L.shape[0]) for j in range(region.L.shape[1]))
        records.extend((rid, "offset", i, 0, region.c[i]) for i in range(region.c.size))
    return pd.DataFrame.from_records(records, columns=["region_id", "kind", "row", "col", "value"])


def export_solution(sol: ExplicitSolution, out_dir, stem: str) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}_partition.csv"
    json_path.write_text(json.dumps(solution_to_dict(sol), indent=2))
    partition_frame(sol).to_csv(csv_path, index=False)
    logger.info(f"Wrote {json_path} and {csv_path}")
    return {"json": str(json_path), "csv": str(csv_path)}


def load_solution(path) -> ExplicitSolution:
    return solution_from_dict(json.loads(Path(path).read_text()))


def parse_vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=float)
    except ValueError:
        raise ValueError(f"--{name} expects comma-separated numbers, got '{text}'")


def parse_domain(text: str) -> np.ndarray:
    """'lo:hi,lo:hi,...' -> array of [lower, upper] pairs."""
    pairs = []
    for item in text.split(","):
        try:
            lo, hi = item.split(":")
            pairs.append([float(lo), float(hi)])
        except ValueError:
            raise ValueError(f"--domain expects 'lo:hi' pairs separated by commas, got '{item}'")
    bounds = np.array(pairs, dtype=float)
    if np.any(bounds[:, 0] > bounds[:, 1]):
        raise ValueError("--domain lower bounds must not exceed upper bounds")
    return bounds


def load_basis(path) -> np.ndarray:
    """V_p override from a JSON nested array or a headerless CSV."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"{path}: basis file not found")
    if path.suffix == ".json":
        return np.array(json.loads(path.read_text()), dtype=float)
    return pd.read_csv(path, header=None).to_numpy(dtype=float)


def apply_overrides(problem: ProblemFile, args) -> ProblemFile:
    """CLI flags override the environment; problem-file tolerances override both."""
    if getattr(args, "tol_rank", None) is not None:
        settings.TOL_RANK = args.tol_rank
    if getattr(args, "tol_opt", None) is not None:
        settings.TOL_OPT = args.tol_opt
    if getattr(args, "seed", None) is not None:
        settings.SEED = args.seed
    if getattr(args, "workers", None) is not None:
        settings.MAX_WORKERS = args.workers
    if problem.options.tol_rank is not None:
        settings.TOL_RANK = problem.options.tol_rank
    if problem.options.tol_opt is not None:
        settings.TOL_OPT = problem.options.tol_opt
    if getattr(args, "phi", None) is not None:
        if args.phi == 0:
            raise ValueError("--phi must be non-zero")
        problem.options.phi = args.phi
    if getattr(args, "vp_file", None):
        problem.options.V_p = load_basis(args.vp_file)
    return problem


def require_system(problem: ProblemFile, command: str):
    if problem.system is None:
        raise ValueError(f"{command} needs a 'system' block in the problem file")


def build_dpc(problem: ProblemFile, seed: int | None = None) -> DpcPipeline:
    """Data -> partition -> raw QP -> reduction maps -> alpha and beta QPs."""
    data = problem.data_record(seed)
    part = partition(data, problem.horizons)
    raw = build_dpc_raw(part, problem.weights, problem.constraints)
    maps = build_reduction_maps(part, Phi=problem.options.phi, V_p=problem.options.V_p)
    h = problem.horizons
    ranks = rank_report(part, maps, problem.m, h.n, h.N_p, h.N_f)
    alpha = eliminate_equalities(raw, maps)
    beta = reduce_to_beta(raw, maps)
    logger.info(f"DPC reduction: l={part.l}, nu={maps.nu}, mu={maps.mu}")
    return DpcPipeline(data, part, raw, maps, alpha, beta, ranks)


def build_mpc(problem: ProblemFile) -> ParametricQP:
    require_system(problem, "mpc")
    return condense_mpc(problem.system, problem.weights, problem.constraints, problem.horizons.N_f)


def solve_mpc(problem: ProblemFile, domain: np.ndarray | None = None) -> tuple[ParametricQP, ExplicitSolution]:
    if domain is not None:
        problem.options.mpc_domain = domain
    qp = build_mpc(problem)
    return qp, explicit_solve(qp, problem.mpc_domain(qp))


def solve_dpc(problem: ProblemFile, seed: int | None = None,
              domain: np.ndarray | None = None) -> tuple[DpcPipeline, ExplicitSolution]:
    if domain is not None:
        problem.options.dpc_domain = domain
    pipe = build_dpc(problem, seed)
    return pipe, explicit_solve(pipe.beta, problem.dpc_domain(pipe.part))


def cmd_check_data(problem: ProblemFile, args) -> tuple[dict, int]:
    data = problem.data_record(args.seed)
    h = problem.horizons
    order = 0
    for N in range(1, max_excitation_order(data.m, data.N_d) + 1):
        if not is_persistently_exciting(data.u_d, N, m=data.m):
            break
        order = N
    pe = order >= h.N_e
    result = {
        "N_d": data.N_d,
        "required_order": h.N_e,
        "achieved_order": order,
        "persistently_exciting": pe,
    }
    if data.N_d >= h.N_p + h.N_f:
        part = partition(data, h)
        maps = build_reduction_maps(part, Phi=problem.options.phi, V_p=problem.options.V_p)
        result["rank_report"] = rank_report(part, maps, data.m, h.n, h.N_p, h.N_f).to_dict()
    if not pe:
        logger.warning(f"data is persistently exciting up to order {order}, need {h.N_e}")
    return result, 0 if pe else EXIT_VALIDATION


def cmd_mpc_explicit(problem: ProblemFile, args) -> tuple[dict, int]:
    _, sol = solve_mpc(problem, args.domain)
    files = export_solution(sol, args.out_dir, f"{problem.name}_mpc")
    return {"s": sol.s, "stats": sol.stats, "files": files}, 0


def cmd_dpc_explicit(problem: ProblemFile, args) -> tuple[dict, int]:
    pipe, sol = solve_dpc(problem, args.seed, args.domain)
    files = export_solution(sol, args.out_dir, f"{problem.name}_dpc")
    return {
        "s": sol.s, "stats": sol.stats, "files": files,
        "dimensions": {"l": pipe.part.l, "nu": pipe.maps.nu, "mu": pipe.maps.mu},
        "rank_report": pipe.ranks.to_dict(),
    }, 0


def compare(problem: ProblemFile, samples: int, seed: int | None = None,
            mpc_domain=None, dpc_domain=None) -> dict:
    """Region counts, explicit-vs-explicit deviation, coupling residuals and congruence residuals."""
    require_system(problem, "compare")
    mpc_qp, mpc_sol = solve_mpc(problem, mpc_domain)
    pipe, dpc_sol = solve_dpc(problem, seed, dpc_domain)
    equivalence = sampled_equivalence(mpc_sol, dpc_sol, pipe.maps, pipe.part, problem.system,
                                      n_samples=samples, seed=seed)
    congruence = check_congruence(mpc_qp, pipe.alpha, pipe.beta, pipe.maps, pipe.part, problem.system)

    checks = min(samples, 100)
    uf_max, lam_max, degenerate, infeasible = 0.0, 0.0, 0, 0
    if checks:
        for xi in sample_parameters(dpc_sol.domain, checks, seed=seed):
            report = check_kkt_coupling(mpc_qp, pipe.beta, pipe.maps, pipe.part, problem.system, xi)
            if report.status != "optimal":
                infeasible += 1
                continue
            uf_max = max(uf_max, report.uf_residual)
            if report.nondegenerate:
                lam_max = max(lam_max, report.lambda_residual)
            else:
                degenerate += 1

    logger.info(f"s_MPC = {mpc_sol.s}, s_DPC = {dpc_sol.s}")
    logger.info(f"explicit u_f deviation {equivalence.max_uf_deviation:.3e} over {equivalence.samples} samples")
    logger.info(f"coupling residuals: u_f {uf_max:.3e}, lambda {lam_max:.3e} "
                f"({degenerate} degenerate, {infeasible} infeasible samples excluded)")
    logger.info(f"congruence: max residual {congruence.max_residual:.3e}")
    return {
        "s_mpc": mpc_sol.s,
        "s_dpc": dpc_sol.s,
        "counts_equal": mpc_sol.s == dpc_sol.s,
        "equivalence": equivalence.to_dict(),
        "coupling": {"uf_residual": uf_max, "lambda_residual": lam_max,
                     "degenerate_samples": degenerate, "infeasible_samples": infeasible},
        "congruence": congruence.to_dict(),
        "mpc_stats": mpc_sol.stats,
        "dpc_stats": dpc_sol.stats,
        "dimensions": {"l": pipe.part.l, "nu": pipe.maps.nu, "mu": pipe.maps.mu},
    }


def cmd_compare(problem: ProblemFile, args) -> tuple[dict, int]:
    report = compare(problem, args.samples, args.seed, dpc_domain=args.domain)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{problem.name}_compare.json"
    path.write_text(json.dumps(report, indent=2))
    report["file"] = str(path)
    return report, 0


def cmd_simulate(problem: ProblemFile, args) -> tuple[dict, int]:
    require_system(problem, "simulate")
    x0 = parse_vector(args.x0, "x0") if args.x0 else np.zeros(problem.system.n)
    if args.kind == DPC:
        pipe, sol = solve_dpc(problem, args.seed, args.domain)
        controller = Controller(DPC, solution=sol, maps=pipe.maps, part=pipe.part)
    elif args.kind == MPC:
        _, sol = solve_mpc(problem, args.domain)
        controller = Controller(MPC, solution=sol)
    else:
        controller = Controller(args.kind, qp=build_mpc(problem))
    traj = closed_loop(problem.system, controller, x0, args.steps)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{problem.name}_{args.kind}_trajectory.csv"
    traj.to_frame().to_csv(path, index=False)
    logger.info(f"Wrote {path}")
    return {
        "steps": traj.steps,
        "final_state": traj.states[-1].tolist(),
        "max_constraint_violation": max_constraint_violation(traj, problem.constraints),
        "file": str(path),
    }, 0


def run_example(name: str, args) -> tuple[dict, int]:
    """Built-in configuration; mismatching acceptance numbers are a numerical failure."""
    problem = apply_overrides(builtin_problem(name), args)
    expected = problem.options.expected
    mpc_qp, mpc_sol = solve_mpc(problem)
    pipe, dpc_sol = solve_dpc(problem, args.seed)
    result = {
        "s_mpc": mpc_sol.s,
        "s_dpc": dpc_sol.s,
        "H_check": pipe.beta.H.tolist(),
        "F_check": pipe.beta.F.tolist(),
        "dimensions": {"l": pipe.part.l, "nu": pipe.maps.nu, "mu": pipe.maps.mu},
        "mpc_stats": mpc_sol.stats,
        "dpc_stats": dpc_sol.stats,
    }
    print(f"s_MPC = {mpc_sol.s}, s_DPC = {dpc_sol.s}", file=sys.stderr)
    if "H_check" in expected:
        print(f"H_check = {np.round(pipe.beta.H, 12).tolist()}", file=sys.stderr)
        print(f"F_check = {np.round(pipe.beta.F, 12).tolist()}", file=sys.stderr)

    failures = []
    if "s_mpc" in expected and mpc_sol.s != expected["s_mpc"]:
        failures.append(f"s_MPC = {mpc_sol.s}, expected {expected['s_mpc']}")
    if mpc_sol.s != dpc_sol.s:
        failures.append(f"s_MPC = {mpc_sol.s} differs from s_DPC = {dpc_sol.s}")
    for key, actual in (("H_check", pipe.beta.H), ("F_check", pipe.beta.F)):
        if key in expected and not np.allclose(actual, expected[key], rtol=0.0, atol=1e-9):
            failures.append(f"{key} = {np.round(actual, 12).tolist()}, expected {expected[key]}")
    if failures:
        for stats_name, stats in (("mpc", mpc_sol.stats), ("dpc", dpc_sol.stats)):
            logger.warning(f"{stats_name} degeneracy report: {stats}")
        raise RuntimeError("; ".join(failures))

    origin = evaluate(mpc_sol, np.zeros(mpc_qp.n_theta))
    result["origin_law"] = None if origin.z is None else origin.z.tolist()
    return result, 0


class CliParser(argparse.ArgumentParser):
    """Usage errors raise ValueError so they reach the JSON envelope with exit code 2."""

    def error(self, message):
        raise ValueError(message)


# Values of these options may start with "-" (negative bounds).
SIGNED_VALUE_OPTIONS = ("--domain", "--x0")


def attach_signed_values(argv: list[str]) -> list[str]:
    """["--domain", "-1:1"] -> ["--domain=-1:1"] so argparse does not read the value as an option."""
    out = []
    i = 0
    while i < len(argv):
        token = argv[i]
        if token in SIGNED_VALUE_OPTIONS and i + 1 < len(argv):
            out.append(f"{token}={argv[i + 1]}")
            i += 2
            continue
        out.append(token)
        i += 1
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(description="Explicit MPC and data-driven predictive control")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol-rank", type=float, default=None, help="Relative singular-value cutoff for rank decisions")
    common.add_argument("--tol-opt", type=float, default=None, help="Feasibility / multiplier tolerance of the QP solver")
    common.add_argument("--seed", type=int, default=None, help="Seed for data generation and sampling")
    common.add_argument("--workers", type=int, default=None, help="Threads for facet exploration")
    common.add_argument("--phi", type=float, default=None, help="Phi = phi * identity in K_f = (U_f V_p)' Phi")
    common.add_argument("--vp-file", default=None, help="JSON or CSV file with a V_p basis override")
    common.add_argument("--domain", type=parse_domain, default=None,
                        help="Exploration box as 'lo:hi,lo:hi,...' (state for mpc, past window for dpc)")
    common.add_argument("--out-dir", default=DEFAULT_OUT_DIR, help="Directory for written files")

    sub = parser.add_subparsers(dest="command", required=True)
    for command, text in (
        ("check-data", "Persistency of excitation and rank lemmas"),
        ("mpc-explicit", "Explicit MPC law, JSON + CSV export"),
        ("dpc-explicit", "Explicit DPC law, JSON + CSV export"),
        ("compare", "Region counts, sampled equivalence and coupling residuals"),
        ("simulate", "Closed-loop run, CSV trajectory"),
    ):
        p = sub.add_parser(command, parents=[common], help=text)
        p.add_argument("problem", help="Problem file (JSON)")
        if command == "compare":
            p.add_argument("--samples", type=int, default=1000, help="Sampled past windows")
        if command == "simulate":
            p.add_argument("--kind", choices=CONTROLLER_KINDS, default=MPC, help="Controller to run")
            p.add_argument("--x0", default=None, help="Initial state, comma-separated")
            p.add_argument("--steps", type=int, default=30, help="Closed-loop steps")
    for command in ("example1", "example2"):
        sub.add_parser(command, parents=[common], help=f"Built-in {command} with its acceptance numbers")
    return parser


COMMANDS = {
    "check-data": cmd_check_data,
    "mpc-explicit": cmd_mpc_explicit,
    "dpc-explicit": cmd_dpc_explicit,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
}


def run(argv=None) -> int:
    """Parse, dispatch and print the JSON envelope; returns the exit code."""
    argv = attach_signed_values(sys.argv[1:] if argv is None else list(argv))
    try:
        args = build_parser().parse_args(argv)
        if args.command in ("example1", "example2"):
            result, code = run_example(args.command, args)
        else:
            problem = apply_overrides(load_problem(args.problem), args)
            result, code = COMMANDS[args.command](problem, args)
        print(json.dumps({"success": code == 0, "command": args.command, **result}, indent=2, default=str))
        return code

    except ValueError as e:
        logger.error(f"Validation error: {e}")
        print(json.dumps({"success": False, "error": {"message": str(e), "type": "validation"}}, indent=2))
        return EXIT_VALIDATION
    except (RuntimeError, np.linalg.LinAlgError) as e:
        logger.error(f"Numerical failure: {e}")
        print(json.dumps({"success": False, "error": {"message": str(e), "type": "numerical"}}, indent=2))
        return EXIT_NUMERICAL


def main():
    logging.basicConfig(
        level=logging.DEBUG if settings.DEBUG else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
