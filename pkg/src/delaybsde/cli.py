"""Command-line entry point: experiment orchestration and CSV emission.

Commands
    check-constants   evaluate the feasibility constants, optionally on a
                      (beta, gamma) grid
    solve             run the Picard solver, emit per-node summary and sweep
                      diagnostics
    variational       directional state-derivative solve
    compare-z         node-wise relative distance between the regression
                      control and the flow-formula control
    fd-check          difference quotients of Y against the directional solve
    study-picard      sweep-diagnostic contraction study
    study-yinc        increment-moment rate study
    study-l2reg       control mean-square regularity rate study
    study-apriori     perturbation scaling study

Every run writes a manifest (config hash, seed, versions) beside its outputs;
identical config and seed reproduce outputs byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build_problem, load_config, solver_settings
from .constants import constants_report, search_feasible
from .regularity import apriori_scaling, l2_regularity, y_increment_rate
from .solver import (
    fd_directional_check,
    picard_solve,
    representation_z,
    variational_solve,
)
from .forward import simulate_forward


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_manifest(out_dir, cfg, args, command):
    payload = json.dumps(cfg, sort_keys=True).encode()
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(payload).hexdigest(),
        "seed": args.seed if args.seed is not None else cfg.get("seed", 0),
        "overrides": {
            k: getattr(args, k)
            for k in ("paths", "steps", "picard", "tol")
            if getattr(args, k, None) is not None
        },
        "versions": {"delaybsde": __version__, "numpy": np.__version__},
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _grid_from(spec_triplet, fallback):
    if spec_triplet is None:
        return fallback
    lo, hi, n = spec_triplet
    return np.linspace(float(lo), float(hi), int(n))


def _parse_grid_flag(text):
    try:
        lo, hi, n = text.split(":")
        return [float(lo), float(hi), int(n)]
    except ValueError as exc:
        raise ConfigError(f"grid flag must look like lo:hi:n, got {text!r}") from exc


def _prepare(args, command):
    cfg = load_config(args.config)
    out_dir = Path(args.out or cfg.get("output", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, cfg, args, command)
    return cfg, out_dir


def _solve_from_config(cfg, args):
    problem = build_problem(cfg)
    settings = solver_settings(cfg, vars(args))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    grid = np.linspace(0.0, problem.horizon, settings["steps"] + 1)
    forward = simulate_forward(problem.forward, problem.x0, grid, settings["paths"], seed)
    solution = picard_solve(problem, forward, settings["basis"],
                            settings["picard"], settings["tol"])
    return problem, settings, forward, solution


def cmd_check_constants(args):
    cfg, out_dir = _prepare(args, "check-constants")
    problem = build_problem(cfg)
    params = problem.structural_params()
    beta_spec = _parse_grid_flag(args.beta_grid) if args.beta_grid else cfg.get("beta_grid")
    gamma_spec = _parse_grid_flag(args.gamma_grid) if args.gamma_grid else cfg.get("gamma_grid")
    betas = _grid_from(beta_spec, [params.beta])
    gammas = _grid_from(gamma_spec, [params.gamma])
    header = ["beta", "gamma", "d1", "d2", "d3", "cp",
              "l2_lhs_y", "l2_lhs_z", "lp_lhs_y", "lp_lhs_z", "feasible"]
    rows = []
    from dataclasses import replace

    for beta in betas:
        for gamma in gammas:
            rep = constants_report(replace(params, beta=float(beta), gamma=float(gamma)))
            feasible = rep.feasible_l2 if params.p == 2 else (
                rep.feasible_energy and rep.feasible_contraction
            )
            rows.append([rep.beta, rep.gamma, rep.d1, rep.d2, rep.d3, rep.cp,
                         rep.l2_lhs_y, rep.l2_lhs_z, rep.lp_lhs_y, rep.lp_lhs_z, feasible])
    write_csv(out_dir / "constants.csv", header, rows)
    best = search_feasible(params, betas, gammas)
    verdict = "none" if best is None else f"beta={best[0]} gamma={best[1]} margin={best[2]}"
    (out_dir / "verdict.txt").write_text(f"best_feasible: {verdict}\n")
    print(f"wrote {out_dir / 'constants.csv'} ({len(rows)} rows); best_feasible: {verdict}")
    return 0


def _solution_csv(out_dir, grid, solution):
    rows = []
    for i, t in enumerate(grid):
        y_i = solution.y[:, i]
        z_i = solution.z[:, i].reshape(len(y_i), -1)
        rows.append([
            float(t),
            float(np.mean(y_i)), float(np.std(y_i)),
            float(np.mean(z_i)), float(np.std(z_i)),
        ])
    write_csv(out_dir / "solution.csv", ["t", "mean_y", "sd_y", "mean_z", "sd_z"], rows)
    diag = [[k + 1, dy, dz] for k, (dy, dz) in
            enumerate(zip(solution.diffs_y, solution.diffs_z))]
    write_csv(out_dir / "diagnostics.csv", ["sweep", "diff_y", "diff_z"], diag)


def cmd_solve(args):
    cfg, out_dir = _prepare(args, "solve")
    problem, settings, forward, solution = _solve_from_config(cfg, args)
    _solution_csv(out_dir, forward.grid, solution)
    feas = solution.feasibility or {}
    print(
        f"solved in {solution.sweeps} sweeps; "
        f"mean Y0 = {float(np.mean(solution.y[:, 0])):.6g}; "
        f"feasibility: {feas}"
    )
    return 0


def _directions(problem):
    dim = problem.dim_x
    return [np.eye(dim)[k] for k in range(dim)]


def cmd_variational(args):
    cfg, out_dir = _prepare(args, "variational")
    problem, settings, forward, solution = _solve_from_config(cfg, args)
    rows = []
    for h in _directions(problem):
        var = variational_solve(problem, forward, solution, h,
                                settings["basis"], settings["picard"], settings["tol"])
        for i, t in enumerate(forward.grid):
            p_i = var.p[:, i]
            q_i = var.q[:, i].reshape(len(p_i), -1)
            rows.append([float(t), int(np.argmax(h)),
                         float(np.mean(p_i)), float(np.std(p_i)),
                         float(np.mean(q_i)), float(np.std(q_i))])
    write_csv(out_dir / "variational.csv",
              ["t", "direction", "mean_dy", "sd_dy", "mean_dz", "sd_dz"], rows)
    print(f"wrote {out_dir / 'variational.csv'}")
    return 0


def cmd_compare_z(args):
    cfg, out_dir = _prepare(args, "compare-z")
    problem, settings, forward, solution = _solve_from_config(cfg, args)
    variationals = [
        variational_solve(problem, forward, solution, h,
                          settings["basis"], settings["picard"], settings["tol"])
        for h in _directions(problem)
    ]
    z_rep = representation_z(forward, variationals, problem.forward)
    rows = []
    for i, t in enumerate(forward.grid):
        diff = solution.z[:, i] - z_rep[:, i]
        num = float(np.sqrt(np.mean(np.sum(diff**2, axis=(-2, -1)))))
        den = float(np.sqrt(np.mean(np.sum(z_rep[:, i] ** 2, axis=(-2, -1)))))
        rel = num / den if den > 1e-8 else num
        rows.append([float(t), num, den, rel])
    write_csv(out_dir / "compare_z.csv", ["t", "abs_distance", "ref_norm", "rel_distance"], rows)
    interior = [row[3] for row in rows[1:-1]]
    print(f"max interior relative distance: {max(interior):.4g}")
    return 0


def cmd_fd_check(args):
    cfg, out_dir = _prepare(args, "fd-check")
    problem = build_problem(cfg)
    settings = solver_settings(cfg, vars(args))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    study = cfg.get("study", {})
    h = np.asarray(study.get("fd_direction", [1.0] * problem.dim_x), dtype=float)
    epsilons = study.get("fd_epsilons", [0.5, 0.25, 0.125])
    report = fd_directional_check(
        problem, h, epsilons, settings["paths"], settings["steps"], seed,
        settings["basis"], settings["picard"], settings["tol"],
    )
    rows = [[e, err, se] for e, err, se in
            zip(report.epsilons, report.errors, report.block_ses)]
    write_csv(out_dir / "fd_check.csv", ["epsilon", "error", "block_se"], rows)
    (out_dir / "verdict.txt").write_text(
        f"noise_floor: {_fmt(report.noise_floor)}\n"
        f"noise_floor_se: {_fmt(report.noise_floor_se)}\n"
        f"richardson_error: {_fmt(report.richardson_error)}\n"
    )
    print(f"fd errors: {report.errors}; noise floor {report.noise_floor:.4g}")
    return 0


def cmd_study_picard(args):
    cfg, out_dir = _prepare(args, "study-picard")
    problem, settings, forward, solution = _solve_from_config(cfg, args)
    diffs = [max(dy, dz) for dy, dz in zip(solution.diffs_y, solution.diffs_z)]
    rows = []
    for k, (dy, dz) in enumerate(zip(solution.diffs_y, solution.diffs_z)):
        ratio = diffs[k] / diffs[k - 1] if k and diffs[k - 1] > 0 else float("nan")
        rows.append([k + 1, dy, dz, ratio])
    write_csv(out_dir / "picard.csv", ["sweep", "diff_y", "diff_z", "ratio"], rows)
    contracting = all(row[3] < 1 for row in rows[2:] if np.isfinite(row[3]))
    feas = solution.feasibility or {}
    (out_dir / "verdict.txt").write_text(
        f"ratios_below_one_after_sweep_2: {str(bool(contracting)).lower()}\n"
        f"feasible_l2: {str(bool(feas.get('l2', False))).lower()}\n"
    )
    print(f"sweep diffs: {diffs}; contracting after sweep 2: {contracting}")
    return 0


def cmd_study_yinc(args):
    cfg, out_dir = _prepare(args, "study-yinc")
    problem, settings, forward, solution = _solve_from_config(cfg, args)
    study = cfg.get("study", {})
    horizon = problem.horizon
    seps = study.get("separations", [horizon / 40, horizon / 20, horizon / 10, horizon / 5])
    p = float(study.get("moment_p", 2.0))
    tol = float(study.get("slope_tol", 0.15 if p == 2 else 0.3))
    report = y_increment_rate(solution, p, seps, tol)
    write_csv(out_dir / "yinc.csv", ["separation", "moment"],
              list(zip(report.sizes, report.values)))
    _write_rate_verdict(out_dir, report)
    print(f"increment moment slope: {report.slope:.3f} (target {report.target_slope})")
    return 0


def _write_rate_verdict(out_dir, report):
    (out_dir / "verdict.txt").write_text(
        f"target_slope: {_fmt(report.target_slope)}\n"
        f"fitted_slope: {_fmt(report.slope)}\n"
        f"pass: {str(bool(report.passed)).lower()}\n"
    )


def cmd_study_l2reg(args):
    cfg, out_dir = _prepare(args, "study-l2reg")
    problem = build_problem(cfg)
    settings = solver_settings(cfg, vars(args))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    study = cfg.get("study", {})
    meshes = args.meshes or study.get("meshes", [10, 20, 40, 80])
    ref_steps = int(study.get("reference_steps", 160))
    tol_slope = float(study.get("slope_tol", 0.3))
    grid = np.linspace(0.0, problem.horizon, ref_steps + 1)
    forward = simulate_forward(problem.forward, problem.x0, grid, settings["paths"], seed)
    solution = picard_solve(problem, forward, settings["basis"],
                            settings["picard"], settings["tol"])
    variationals = [
        variational_solve(problem, forward, solution, h,
                          settings["basis"], settings["picard"], settings["tol"])
        for h in _directions(problem)
    ]
    z_ref = representation_z(forward, variationals, problem.forward)
    report = l2_regularity(forward, z_ref, meshes, settings["basis"], tol_slope)
    write_csv(out_dir / "l2reg.csv", ["mesh_size", "functional"],
              list(zip(report.sizes, report.values)))
    _write_rate_verdict(out_dir, report)
    print(f"regularity slope: {report.slope:.3f} (target {report.target_slope})")
    return 0


def cmd_study_apriori(args):
    cfg, out_dir = _prepare(args, "study-apriori")
    problem = build_problem(cfg)
    settings = solver_settings(cfg, vars(args))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    study = cfg.get("study", {})
    epsilons = study.get("epsilons", [0.4, 0.2, 0.1])
    grid = np.linspace(0.0, problem.horizon, settings["steps"] + 1)
    forward = simulate_forward(problem.forward, problem.x0, grid, settings["paths"], seed)
    report = apriori_scaling(
        problem, forward, epsilons,
        terminal_shift=float(study.get("terminal_shift", 1.0)),
        driver_shift=float(study.get("driver_shift", 1.0)),
        max_sweeps=settings["picard"], tol=settings["tol"],
    )
    rows = [
        [e, s, hy, hz, rt, rf, r]
        for e, s, hy, hz, rt, rf, r in zip(
            report.epsilons, report.s_norms, report.h_norms_y, report.h_norms_z,
            report.rhs_terminal, report.rhs_driver, report.ratios,
        )
    ]
    write_csv(out_dir / "apriori.csv",
              ["epsilon", "s_norm", "h_norm_y", "h_norm_z",
               "rhs_terminal", "rhs_driver", "ratio"], rows)
    spread = (max(report.ratios) - min(report.ratios)) / min(report.ratios)
    (out_dir / "verdict.txt").write_text(f"ratio_spread: {_fmt(float(spread))}\n")
    print(f"stability ratios: {report.ratios}; spread {spread:.3g}")
    return 0


_COMMANDS = {
    "check-constants": cmd_check_constants,
    "solve": cmd_solve,
    "variational": cmd_variational,
    "compare-z": cmd_compare_z,
    "fd-check": cmd_fd_check,
    "study-picard": cmd_study_picard,
    "study-yinc": cmd_study_yinc,
    "study-l2reg": cmd_study_l2reg,
    "study-apriori": cmd_study_apriori,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="delaybsde",
        description="Regression Monte Carlo engine for FBSDE with time-delayed generators",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True)
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--paths", type=int, default=None)
        cmd.add_argument("--steps", type=int, default=None)
        cmd.add_argument("--picard", type=int, default=None)
        cmd.add_argument("--tol", type=float, default=None)
        cmd.add_argument("--threads", type=int, default=None)
        cmd.add_argument("--out", default=None)
        if name == "check-constants":
            cmd.add_argument("--beta-grid", dest="beta_grid", default=None)
            cmd.add_argument("--gamma-grid", dest="gamma_grid", default=None)
        if name == "study-l2reg":
            cmd.add_argument("--meshes", type=lambda s: [int(x) for x in s.split(",")],
                             default=None)
    return parser


def _limit_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(getattr(args, "threads", None))
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
