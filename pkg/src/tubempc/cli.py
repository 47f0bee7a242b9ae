"""Command-line front end.

Subcommands: propagate, solve, terminal-set, simulate, compare, report.
Exit codes: 0 success, 1 malformed config or bad arguments, 2 domain-validity
failure, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bounders import compute_frobenius_constants
from .closedloop import (
    FeedbackLaw,
    compare_controllers,
    sample_disturbance,
    simulate_closed_loop,
)
from .config import ConfigError, ExperimentConfig
from .ellipsoid import Ellipsoid
from .ocp import SolverOptions, TubeOCP, solve_terminal_set, solve_tube_ocp
from .tube import PolicyParams, integrate_tube, propagate_openloop

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DOMAIN = 2
EXIT_NOCONV = 3


def _load_config(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.solver["seed"] = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.scenarios is not None:
        cfg.simulation["n_scenarios"] = args.scenarios
    return cfg


def _setup(cfg):
    model = cfg.build_model()
    cache_dir = (os.path.join(cfg.output_dir, "cache")
                 if cfg.bounders["cache"] else None)
    bd = compute_frobenius_constants(
        model, grid_density=cfg.bounders["grid_density"], cache_dir=cache_dir
    )
    return model, bd


def _solver_options(cfg):
    data = dict(cfg.solver)
    return SolverOptions.from_dict(data)


def _build_problem(cfg, model):
    pb = cfg.problem
    x0 = pb["x0"]
    if x0 is None:
        raise ConfigError("problem:x0", "initial state is required")
    D = np.eye(model.n_x) if pb["D"] is None else np.asarray(pb["D"], float)
    x_ref = (np.zeros(model.n_x) if pb["x_ref"] is None
             else np.asarray(pb["x_ref"], float))
    terminal = None
    if pb["terminal"] is not None:
        terminal = Ellipsoid.from_dict(pb["terminal"])
    return TubeOCP(
        model=model,
        T=float(pb["T"]),
        N=int(pb["N"]),
        x_hat=np.asarray(x0, float),
        constraints=cfg.build_constraints(),
        D=D,
        x_ref=x_ref,
        rho_u=float(pb["rho_u"]),
        terminal=terminal,
        options=_solver_options(cfg),
    )


def _read_params_csv(path, N, n_x, n_u):
    body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if body.shape[0] != N:
        raise ConfigError(path, f"expected {N} parameter rows, got {body.shape[0]}")
    off = 1
    u = body[:, off: off + n_u]
    gamma = body[:, off + n_u]
    lam = body[:, off + n_u + 1]
    kap = body[:, off + n_u + 2]
    S = body[:, off + n_u + 3: off + n_u + 3 + n_x * n_u].reshape(N, n_x, n_u)
    return PolicyParams(u_x=u, gamma=gamma, lam=lam, kappa=kap, S=S)


def cmd_propagate(cfg):
    model, bd = _setup(cfg)
    pb = cfg.problem
    pr = cfg.propagate
    if pb["x0"] is None:
        raise ConfigError("problem:x0", "initial state is required")
    x0 = np.asarray(pb["x0"], float)
    Q0 = (np.zeros((model.n_x, model.n_x)) if pr["Q0"] is None
          else np.asarray(pr["Q0"], float))
    T, N = float(pb["T"]), int(pb["N"])
    if pr["params_file"] is not None:
        params = _read_params_csv(pr["params_file"], N, model.n_x, model.n_u)
        tube = integrate_tube(model, x0, Q0, params, T, N, bd,
                              n_sub=cfg.solver["n_sub"])
    elif pr["mode"] == "openloop":
        u = (np.tile(model.q_u, (N, 1)) if pr["u"] is None
             else np.tile(np.atleast_1d(np.asarray(pr["u"], float)), (N, 1)))
        tube = propagate_openloop(model, Ellipsoid(x0, Q0), u, T, N,
                                  pr["lambda"], pr["kappa"], bd,
                                  n_sub=cfg.solver["n_sub"])
    else:
        raise ConfigError("propagate:mode",
                          "mode must be 'openloop' or a params_file must be set")
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    tube.to_csv(os.path.join(out, "tube.csv"))
    tube.boundary_csv(os.path.join(out, "tube_boundary.csv"))
    cfg.write_manifest(out, extra={"command": "propagate", "valid": tube.valid})
    print(f"tube written to {out} (valid={tube.valid})")
    return EXIT_OK if tube.valid else EXIT_DOMAIN


def cmd_solve(cfg):
    model, bd = _setup(cfg)
    problem = _build_problem(cfg, model)
    report = solve_tube_ocp(problem, bd)
    out = cfg.output_dir
    report.write(out)
    cfg.write_manifest(out, extra={"command": "solve",
                                   "converged": report.converged})
    print(
        f"solve: converged={report.converged} "
        f"objective={report.objective_value:.6g} "
        f"max_violation={report.max_constraint_violation:.3e} "
        f"wall_time={report.wall_time:.1f}s"
    )
    if not report.converged:
        return EXIT_NOCONV
    return EXIT_OK if report.tube.valid else EXIT_DOMAIN


def cmd_terminal_set(cfg):
    model, bd = _setup(cfg)
    x_ref = (np.zeros(model.n_x) if cfg.problem["x_ref"] is None
             else np.asarray(cfg.problem["x_ref"], float))
    ts = solve_terminal_set(model, x_ref, bd, options=_solver_options(cfg))
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    payload = {
        "Q_ref": ts.Q_ref.tolist(),
        "lambda": ts.lam,
        "kappa": ts.kap,
        "S": ts.S.tolist(),
        "lam_max_certificate": ts.lam_max,
        "converged": ts.converged,
    }
    with open(os.path.join(out, "terminal_set.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    cfg.write_manifest(out, extra={"command": "terminal-set",
                                   "converged": ts.converged})
    print(f"terminal set: converged={ts.converged} "
          f"trace={np.trace(ts.Q_ref):.6g} lam_max={ts.lam_max:.3e}")
    return EXIT_OK if ts.converged else EXIT_NOCONV


def cmd_simulate(cfg, jobs):
    model, bd = _setup(cfg)
    problem = _build_problem(cfg, model)
    report = solve_tube_ocp(problem, bd)
    if not report.converged:
        print("simulate: tube solve did not converge", file=sys.stderr)
        return EXIT_NOCONV
    law = FeedbackLaw(report.tube, model)
    sim = cfg.simulation
    n_sub = int(sim["n_sub"])
    n_steps = problem.N * n_sub
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    report.write(out)
    worst_margin = np.inf
    n_violations = 0
    for i in range(int(sim["n_scenarios"])):
        w = sample_disturbance(model.Q_w, model.q_w, sim["disturbance_mode"],
                               cfg.solver["seed"] + i, n_steps)
        res = simulate_closed_loop(model, law, problem.x_hat, w, n_sub=n_sub,
                                   constraints=problem.constraints)
        res.to_csv(os.path.join(out, f"scenario_{i:04d}.csv"))
        res.margins_csv(os.path.join(out, f"scenario_{i:04d}_margins.csv"))
        worst_margin = min(worst_margin, res.min_margin())
        n_violations += res.n_violations()
    cfg.write_manifest(out, extra={"command": "simulate"})
    print(f"simulate: {sim['n_scenarios']} scenarios, "
          f"violations={n_violations}, worst_margin={worst_margin:.3e}")
    return EXIT_OK


def cmd_compare(cfg, jobs):
    model, bd = _setup(cfg)
    problem = _build_problem(cfg, model)
    sim = cfg.simulation
    summary, robust, ce, report = compare_controllers(
        model, bd, problem,
        n_scenarios=int(sim["n_scenarios"]),
        seed=cfg.solver["seed"],
        sampling_period=float(sim["sampling_period"]),
        mode=sim["disturbance_mode"],
        n_sub=int(sim["n_sub"]),
        jobs=jobs,
    )
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    if report is not None:
        report.write(out)
    summary.to_csv(os.path.join(out, "compare_summary.csv"))
    with open(os.path.join(out, "compare_summary.json"), "w") as fh:
        json.dump(summary.rows, fh, indent=2, sort_keys=True)
    cfg.write_manifest(out, extra={"command": "compare"})
    for row in summary.rows:
        print(
            f"{row['controller']}: rate={row['violation_rate']:.3f} "
            f"worst_residual={row['worst_residual']:.3e} "
            f"mean_cost={row['mean_tracking_cost']:.4g}"
        )
    return EXIT_OK


def cmd_report(out_dir):
    found = False
    for name in ("report.json", "compare_summary.json", "terminal_set.json",
                 "manifest.json"):
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            found = True
            with open(path) as fh:
                print(f"--- {name} ---")
                print(json.dumps(json.load(fh), indent=2, sort_keys=True))
    if not found:
        print(f"no result artifacts found in {out_dir}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="tubempc",
        description="Robust tube-based MPC: propagate, solve, simulate, compare.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("propagate", "solve", "terminal-set", "simulate", "compare"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", default=None, help="output directory override")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        sp.add_argument("--scenarios", type=int, default=None,
                        help="scenario-count override")
    sp = sub.add_parser("report")
    sp.add_argument("--out", required=True, help="result directory to summarize")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.out)
        cfg = _load_config(args)
        if args.command == "propagate":
            return cmd_propagate(cfg)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "terminal-set":
            return cmd_terminal_set(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.jobs)
        if args.command == "compare":
            return cmd_compare(cfg, args.jobs)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
