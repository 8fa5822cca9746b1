"""Command line front end.

Subcommands:

    kappa        certified contraction rate for (alpha, beta, gamma)
    kernel-check stochasticity / reversibility (and optional MC agreement)
    solve        static bridge problem from a config file
    turnpike     midpoint entropy/Fisher decay sweep
    cost         cost-convergence sweep
    contraction  twisted Wasserstein semigroup contraction check
    window       fixed-window convergence sweep

Exit codes: 0 success, 1 an acceptance-style check failed, 2 configuration
error (bad flags, malformed config, infeasible assumptions).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .config import experiment_from_config, parse_config
from .exceptions import ConfigurationError, InfeasibilityError, KinbridgeError
from .kernel import (check_reversibility, gaussian_kernel, mc_kernel,
                     reduce_kernel, save_kernel)
from .model import build_grid, invariant_measure, quadratic_potential
from .solver import static_coupling
from .twisted import build_twisted_norms


def _print(payload, fmt: str):
    if fmt == "json":
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        for key, value in payload.items():
            print(f"{key},{value}")


def _cmd_kappa(args) -> int:
    pot = quadratic_potential(args.alpha, args.gamma)
    if args.beta is not None:
        from .model import Potential
        pot = Potential(kind="custom", alpha=args.alpha, beta=args.beta,
                        gamma=args.gamma, hessU=lambda x: x)
    tn = build_twisted_norms(pot, optimize=args.optimize)
    payload = {"b": tn.b, "c": tn.c, "kappa": tn.kappa,
               "q_eigenvalues": list(map(float, tn.q_eigenvalues)),
               "optimized": bool(args.optimize)}
    _print(payload, args.format)
    return 0


def _cmd_kernel_check(args) -> int:
    pot = quadratic_potential(args.alpha, args.gamma)
    half = 6.0 / args.alpha ** 0.5
    grid = build_grid((-half, half), (-6.0, 6.0), args.nx, args.nv)
    m = invariant_measure(pot, grid)
    k = gaussian_kernel(args.alpha, args.gamma, args.t, grid, m)
    row_dev = float(np.abs(k.row_quadrature() - 1.0).max())
    col_dev = float(np.abs(k.column_quadrature() - 1.0).max())
    rev_dev = check_reversibility(k, grid)
    payload = {"t": args.t, "nx": args.nx, "nv": args.nv,
               "row_deviation": row_dev, "column_deviation": col_dev,
               "reversibility_deviation": rev_dev,
               "row_ok": row_dev <= 1e-6, "column_ok": col_dev <= 1e-6,
               "reversibility_ok": rev_dev <= 1e-10}
    if args.mc:
        mc = mc_kernel(pot, args.t, grid, m, nsamples=args.nsamples,
                       dt=args.dt, seed=args.seed)
        w = m.phase_weights.ravel()
        tv = 0.5 * np.abs((k.values - mc.values) * w[None, :]).sum(axis=1)
        payload["mc_tv_max"] = float(tv.max())
        payload["mc_ok"] = bool(tv.max() < 0.1)
    if args.save:
        save_kernel(args.save, k)
        payload["saved"] = str(args.save)
    _print(payload, args.format)
    ok = payload["row_ok"] and payload["column_ok"] and payload["reversibility_ok"]
    ok = ok and payload.get("mc_ok", True)
    return 0 if ok else 1


def _cmd_solve(args) -> int:
    cfg = experiment_from_config(parse_config(args.config), out_dir=args.out,
                                 seed=args.seed)
    session = experiments.SweepSession(cfg)
    reports = []
    for T in cfg.T_list:
        pots, report, primal, dual = session.solve(T)
        reports.append({"T": T, "iterations": report.iterations,
                        "marginal_residual_l1": report.marginal_residual_l1,
                        "primal": primal, "dual": dual,
                        "gap": report.gap, "converged": report.converged})
        if args.dump_potentials:
            np.savez(Path(args.dump_potentials).with_suffix(f".T{T:g}.npz"),
                     log_f=pots.log_f, log_g=pots.log_g, T=T)
        if args.dump_coupling:
            kern = session.build_kernel(T)
            if cfg.problem == "ksp":
                kern = reduce_kernel(kern, session.m)
            cpl = static_coupling(pots, kern)
            np.savez(Path(args.dump_coupling).with_suffix(f".T{T:g}.npz"),
                     coupling=cpl.values, T=T)
        if args.dump_diagnostics:
            from .interpolation import (compute_flow, cost_identity_residual,
                                        flow_diagnostics)
            from .twisted import build_twisted_norms
            times = np.linspace(0.0, T, cfg.n_times)
            flow = compute_flow(pots, session.propagator(dense=True), times,
                                session.grid, session.m)
            tn = build_twisted_norms(cfg.potential, optimize=True)
            diag = flow_diagnostics(flow, tn, cfg.potential, session.m,
                                    session.grid,
                                    with_w2=cfg.potential.kind == "quadratic")
            res = cost_identity_residual(flow, diag, primal)
            base = Path(args.dump_diagnostics)
            csv_path = base.with_suffix(f".T{T:g}.csv")
            experiments.diagnostics_csv(csv_path, flow, diag, res)
            from . import plotting
            plotting.diagnostics_figure(csv_path.with_suffix(".png"), diag)
    payload = {"problem": cfg.problem, "reports": reports,
               "schema_version": experiments.SCHEMA_VERSION}
    _print(payload, args.format)
    return 0 if all(r["converged"] for r in reports) else 1


def _run_sweep(args, runner, **kwargs) -> int:
    cfg = experiment_from_config(parse_config(args.config), out_dir=args.out,
                                 seed=args.seed)
    summary = runner(cfg, plot=args.plot, **kwargs)
    if args.format == "csv" and "csv" in summary:
        print(Path(summary["csv"]).read_text(), end="")
    else:
        _print(summary, "json")
    return 0 if summary.get("passed", True) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kinbridge",
        description="bridge solver and long-time diagnostics for kinetic "
                    "Langevin dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kappa", help="certified contraction rate")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--optimize", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(fn=_cmd_kappa)

    p = sub.add_parser("kernel-check", help="kernel stochasticity checks")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--nx", type=int, default=81)
    p.add_argument("--nv", type=int, default=81)
    p.add_argument("--mc", action="store_true", help="compare with an MC kernel")
    p.add_argument("--nsamples", type=int, default=10000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save", type=str, default=None,
                   help="export the kernel (npz + json sidecar)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(fn=_cmd_kernel_check)

    p = sub.add_parser("solve", help="solve the static problem from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-potentials", default=None)
    p.add_argument("--dump-coupling", default=None)
    p.add_argument("--dump-diagnostics", default=None,
                   help="emit the per-time diagnostics CSV and figure")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(fn=_cmd_solve)

    for name, runner in (("turnpike", experiments.run_turnpike_sweep),
                         ("cost", experiments.run_cost_sweep),
                         ("contraction", experiments.run_contraction_check)):
        p = sub.add_parser(name, help=f"{name} sweep")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=".")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--plot", action=argparse.BooleanOptionalAction,
                       default=True)
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.set_defaults(fn=lambda a, r=runner: _run_sweep(a, r))

    p = sub.add_parser("window", help="fixed-window convergence sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--t-fixed", type=float, default=None)
    p.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")

    def _window(a):
        d = parse_config(a.config)
        t_fixed = a.t_fixed if a.t_fixed is not None else float(
            d.get("window.t_fixed", 1.0))
        return _run_sweep(a, experiments.run_fixed_window, t_fixed=t_fixed)
    p.set_defaults(fn=_window)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigurationError, InfeasibilityError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except KinbridgeError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
