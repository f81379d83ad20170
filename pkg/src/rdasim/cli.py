"""Command-line entry point: check | run | energy-report | epsilon-study.

Exit codes: 0 success, 2 configuration error, 3 hypothesis-check failure,
4 solver failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnostics, epidemic
from .config import (
    ConfigError,
    build_boundary,
    build_coefficients,
    build_epi_params,
    build_grid,
    build_initial,
    build_solver_config,
    build_system,
    canonical_echo,
    config_hash,
    diffusion_matrix_samples,
    load_config,
)
from .energy import (
    EnergySpec,
    WeightSearchError,
    WeightVector,
    assemble_coupling_matrix,
    min_eigenvalue,
    select_weights,
)
from .epidemic import AssumptionViolation, build_epi_coefficients, build_epi_system
from .integrator import (
    Problem,
    SimState,
    SolverError,
    dump_state,
    epsilon_refinement_study,
    load_state,
    run,
)
from .grid import StructuredGrid
from .output import (
    write_energy_csv,
    write_json,
    write_norm_series_csv,
    write_step_series_csv,
    write_vtk_structured_points,
)
from .reactions import (
    TruncationParam,
    check_intermediate_sum,
    check_mass_control,
    check_polynomial_growth,
    check_quasi_positivity,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK = 3
EXIT_SOLVER = 4


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


def _assemble(cfg, base_dir: Path):
    """Shared construction: grid, system, coefficients, bc, initial, params."""
    grid = build_grid(cfg)
    if "scenario" in cfg:
        params = build_epi_params(cfg, grid, base_dir)
        system, boundary = build_epi_system(params)
        coeff = build_epi_coefficients(params)
        initial = build_initial(cfg["scenario"]["epi"]["initial"], grid, 4)
        names = list(epidemic.SPECIES)
    else:
        params = None
        system = build_system(cfg)
        coeff = build_coefficients(cfg, grid, system.m, base_dir)
        boundary = build_boundary(cfg, system.m, grid.dim)
        initial = None
        if "initial" in cfg.get("system", {}):
            initial = build_initial(cfg["system"]["initial"], grid, system.m)
        names = [f"u{i + 1}" for i in range(system.m)]
    return grid, system, coeff, boundary, initial, params, names


def _resolve_energy_specs(cfg, system, coeff, seed: int):
    """Energy specs from the diagnostics block; 'auto' runs the weight search."""
    specs = []
    searches = []
    for entry in cfg.get("diagnostics", {}).get("energy", []):
        p = entry["p"]
        choice = entry.get("weights", "auto")
        if choice == "auto":
            weights, k_est = select_weights(
                system, diffusion_matrix_samples(coeff), p,
                samples_per_radius=2000, seed=seed,
            )
            searches.append({"p": p, "weights": list(weights.entries),
                             "bound_constant": k_est})
        else:
            weights = WeightVector(tuple(choice))
        specs.append(EnergySpec(p, weights))
    return specs, searches


def cmd_check(cfg, base_dir: Path, out_dir: Path, seed: int, quiet: bool) -> int:
    """Run every structural hypothesis check plus the dissipativity certificate."""
    report = {"config_sha256": config_hash(cfg), "seed": seed, "checks": []}
    failures = []

    try:
        grid, system, coeff, boundary, _, params, _ = _assemble(cfg, base_dir)
    except AssumptionViolation as exc:
        report["checks"].append({
            "name": "scenario_assumptions",
            "passed": False,
            "violations": [
                {"assumption": v["assumption"], "message": v["message"], "cells": v["cells"]}
                for v in exc.violations
            ],
        })
        write_json(out_dir / "check_report.json", report)
        _say(quiet, f"FAIL scenario_assumptions: {exc}")
        return EXIT_CHECK

    checkers = (
        check_quasi_positivity,
        check_mass_control,
        check_intermediate_sum,
        check_polynomial_growth,
    )
    for checker in checkers:
        result = checker(system, seed=seed)
        entry = {
            "name": result.check,
            "passed": result.passed,
            "samples_tested": result.samples_tested,
            "violation_count": result.violation_count,
            "estimated_constant": result.estimated_constant,
            "details": result.details,
        }
        if not result.passed:
            entry["witnesses"] = [
                {"u": list(u), "x": None if x is None else list(np.atleast_1d(x)),
                 "t": t, "residual": res}
                for u, x, t, res in result.violations[:5]
            ]
            failures.append(result.check)
        report["checks"].append(entry)
        _say(quiet, f"{'ok  ' if result.passed else 'FAIL'} {result.check} "
                    f"({result.samples_tested} samples)")

    samples = diffusion_matrix_samples(coeff)
    energy_entries = cfg.get("diagnostics", {}).get("energy", []) or [{"p": 2}]
    for entry in energy_entries:
        p = entry["p"]
        try:
            weights, k_est = select_weights(system, samples, p,
                                            samples_per_radius=2000, seed=seed)
            eigs = [min_eigenvalue(assemble_coupling_matrix(mats, weights))
                    for mats in samples]
            report["checks"].append({
                "name": f"dissipativity_p{p}",
                "passed": True,
                "weights": list(weights.entries),
                "bound_constant": k_est,
                "min_eigenvalues": eigs,
            })
            _say(quiet, f"ok   dissipativity_p{p} (weights {list(weights.entries)})")
        except WeightSearchError as exc:
            report["checks"].append({
                "name": f"dissipativity_p{p}", "passed": False, "error": str(exc),
            })
            failures.append(f"dissipativity_p{p}")
            _say(quiet, f"FAIL dissipativity_p{p}: {exc}")

    report["passed"] = not failures
    write_json(out_dir / "check_report.json", report)
    if failures:
        _say(quiet, f"failed checks: {', '.join(failures)}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_run(cfg, base_dir: Path, out_dir: Path, seed: int, quiet: bool) -> int:
    grid, system, coeff, boundary, initial, params, names = _assemble(cfg, base_dir)
    if initial is None:
        raise ConfigError("an initial state is required to run (system.initial)")
    solver_cfg = build_solver_config(cfg)
    if solver_cfg.record_dt is None and "record_dt" not in cfg["solver"]:
        solver_cfg.record_dt = solver_cfg.t_end / 200.0
    eps = TruncationParam(cfg["solver"].get("epsilon", 1e-6))
    problem = Problem(grid, system, coeff, boundary)
    meta = {"config_sha256": config_hash(cfg), "seed": seed}

    started = time.perf_counter()
    traj = run(SimState(0.0, initial, eps), solver_cfg, problem,
               config_echo={"canonical": canonical_echo(cfg)})
    elapsed = time.perf_counter() - started
    _say(quiet, f"integrated to t={traj.times[-1]:.6g} "
                f"({traj.step_times.size - 1} steps, {elapsed:.2f}s)")

    write_step_series_csv(out_dir / "series_steps.csv", traj, names, meta)
    p_list = cfg.get("diagnostics", {}).get("p_list", [1.0, 2.0])
    series = diagnostics.norm_series(traj, p_list)
    write_norm_series_csv(out_dir / "series_norms.csv", series, names, meta)

    summary = {
        "config_sha256": meta["config_sha256"],
        "seed": seed,
        "config_echo": canonical_echo(cfg),
        "final_time": float(traj.times[-1]),
        "steps": int(traj.step_times.size - 1),
        "min_value": float(traj.step_minima.min()),
        "halvings_total": int(traj.step_halvings.sum()),
        "runtime_seconds": elapsed,
    }

    bt, budget = diagnostics.mass_budget(traj, system)
    summary["mass_budget_max_abs"] = float(np.max(np.abs(budget)))

    specs, searches = _resolve_energy_specs(cfg, system, coeff, seed)
    if specs:
        trace = diagnostics.energy_trace(traj, specs)
        write_energy_csv(out_dir / "series_energy.csv", trace, meta)
        summary["energy"] = [
            {"p": spec.p, "weights": list(spec.weights.entries),
             "fit": trace.fits[k], "bounded_no_growth": trace.bounded_flags[k]}
            for k, spec in enumerate(specs)
        ]
        if searches:
            summary["weight_searches"] = searches

    if params is not None:
        epi_report = epidemic.decay_report(traj, params)
        write_json(out_dir / "epi_report.json", {
            "config_sha256": meta["config_sha256"],
            "seed": seed,
            "conservation_max_abs": float(np.max(np.abs(epi_report.conservation_residual))),
            "final_fractions": epi_report.final_fractions,
            "decayed": epi_report.decayed,
            "s_infinity": {
                "estimate": epi_report.s_inf.estimate,
                "tail_bound": epi_report.s_inf.tail_bound,
                "decay_time": epi_report.s_inf.decay_time,
                "fit_ok": epi_report.s_inf.fit_ok,
            },
        })
        rows = [[epi_report.conservation_times[k], epi_report.conservation_residual[k]]
                for k in range(epi_report.conservation_times.size)]
        from .output import write_csv
        write_csv(out_dir / "epi_conservation.csv", ["time", "residual"], rows, meta)

    if cfg["output"].get("checkpoints", True):
        traj_dir = out_dir / "trajectory"
        files = []
        for k, t in enumerate(traj.times):
            name = f"state_{k:06d}.ck"
            dump_state(SimState(float(t), traj.states[k], eps), grid, traj_dir / name)
            files.append(name)
        write_json(traj_dir / "trajectory.json", {
            "config_sha256": meta["config_sha256"],
            "seed": seed,
            "m": system.m,
            "epsilon": eps.epsilon,
            "times": [float(t) for t in traj.times],
            "files": files,
            "grid": {
                "origin": list(grid.origin),
                "widths": [w.tolist() for w in grid.widths],
            },
        })

    if cfg["output"].get("vtk", False):
        for k, t in enumerate(traj.times):
            fields = {names[i]: traj.states[k][i] for i in range(system.m)}
            write_vtk_structured_points(out_dir / "vtk" / f"snapshot_{k:06d}.vtk",
                                        grid, fields, title=f"t={t!r}")

    write_json(out_dir / "summary.json", summary)
    return EXIT_OK


def load_trajectory(traj_dir: Path):
    """Rebuild a snapshot-only trajectory from a checkpoint index."""
    import json as _json

    index_path = Path(traj_dir) / "trajectory.json"
    if not index_path.exists():
        raise ConfigError(f"no trajectory index at {index_path}")
    try:
        index = _json.loads(index_path.read_text())
        grid = StructuredGrid([np.asarray(w) for w in index["grid"]["widths"]],
                              origin=index["grid"]["origin"])
        states = []
        for name in index["files"]:
            state = load_state(Path(traj_dir) / name, grid)
            states.append(state.fields)
        times = np.asarray(index["times"], dtype=float)
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"corrupt trajectory at {traj_dir}: {exc}") from None
    return diagnostics.Trajectory(grid=grid, times=times, states=states), index


def cmd_energy_report(cfg, base_dir: Path, out_dir: Path, seed: int, quiet: bool) -> int:
    traj, index = load_trajectory(out_dir / "trajectory")
    grid, system, coeff, *_ = _assemble(cfg, base_dir)
    specs, searches = _resolve_energy_specs(cfg, system, coeff, seed)
    if not specs:
        specs = [EnergySpec(2, WeightVector.ones(system.m))]
    trace = diagnostics.energy_trace(traj, specs)
    meta = {"config_sha256": config_hash(cfg), "seed": seed}
    write_energy_csv(out_dir / "energy_report.csv", trace, meta)
    payload = {
        "config_sha256": meta["config_sha256"],
        "seed": seed,
        "trajectory_sha256": index.get("config_sha256"),
        "energies": [
            {"p": spec.p, "weights": list(spec.weights.entries),
             "fit": trace.fits[k], "bounded_no_growth": trace.bounded_flags[k],
             "sup_value": float(np.max(trace.values[k])),
             "initial_value": float(trace.values[k][0])}
            for k, spec in enumerate(specs)
        ],
    }
    if searches:
        payload["weight_searches"] = searches
    write_json(out_dir / "energy_report.json", payload)
    for entry in payload["energies"]:
        _say(quiet, f"p={entry['p']}: bounded={entry['bounded_no_growth']} "
                    f"fit={entry['fit']}")
    return EXIT_OK


def cmd_epsilon_study(cfg, base_dir: Path, out_dir: Path, seed: int, quiet: bool) -> int:
    grid, system, coeff, boundary, initial, _, _ = _assemble(cfg, base_dir)
    if initial is None:
        raise ConfigError("an initial state is required for the epsilon study")
    solver_cfg = build_solver_config(cfg)
    if solver_cfg.record_dt is None and "record_dt" not in cfg["solver"]:
        solver_cfg.record_dt = solver_cfg.t_end / 50.0
    eps_list = cfg.get("diagnostics", {}).get("epsilon_study", [1e-2, 1e-3, 1e-4])
    problem = Problem(grid, system, coeff, boundary)
    report = epsilon_refinement_study(problem, initial, eps_list, solver_cfg)
    report["config_sha256"] = config_hash(cfg)
    report["seed"] = seed
    write_json(out_dir / "epsilon_study.json", report)
    _say(quiet, f"distances: {report['pair_distances']} "
                f"(monotone={report['monotone_shrinking']})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rdasim",
        description="Finite-volume reaction-diffusion-advection simulator and diagnostics",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("check", "run structural hypothesis checks and the dissipativity certificate"),
        ("run", "integrate the configured problem and write diagnostics"),
        ("energy-report", "recompute energy traces for a stored trajectory"),
        ("epsilon-study", "compare trajectories across truncation strengths"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--out", default=None, help="output directory (default: config output.dir)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        base_dir = Path(args.config).resolve().parent
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        out_dir = Path(args.out) if args.out else Path(cfg["output"]["dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        dispatch = {
            "check": cmd_check,
            "run": cmd_run,
            "energy-report": cmd_energy_report,
            "epsilon-study": cmd_epsilon_study,
        }
        return dispatch[args.command](cfg, base_dir, out_dir, seed, args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionViolation as exc:
        print(f"hypothesis failure: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
