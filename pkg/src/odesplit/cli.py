"""Command-line verification harness.

Subcommands: solve, gradient, taylor, converge, bench.  Options can come
from a `key = value` config file (--config) and are overridden by flags of
the same name.  All reports are CSV; field snapshots use the binary
state-field format.  With --no-timing, reports omit wall-clock columns so
reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import argparse
import sys

from .experiments import (
    ExperimentConfig,
    default_config,
    load_config_file,
    run_bench,
    run_converge_ode,
    run_converge_split,
    run_fhn2d,
    run_mito,
    run_thread_scaling,
)
from .steppers import SCHEME_NAMES

__all__ = ["main", "build_parser"]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="odesplit",
        description="operator-splitting PDE-ODE solver with exact discrete adjoints",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--experiment", choices=("mito", "fhn2d"), default=None)
        p.add_argument("--nx", type=int)
        p.add_argument("--horizon", type=float, help="final time T")
        p.add_argument("--kappa", type=float, help="outer time step")
        p.add_argument("--theta", type=float, help="splitting parameter in [0, 1]")
        p.add_argument("--scheme", choices=SCHEME_NAMES)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", dest="outdir")
        p.add_argument("--seed", type=int)
        p.add_argument("--chunk", type=int)
        p.add_argument("--no-timing", dest="no_timing", action="store_true", default=None)
        return p

    common(sub.add_parser("solve", help="forward solve with snapshots and reports"))
    g = common(sub.add_parser("gradient", help="forward + adjoint gradient"))
    g.add_argument("--control", choices=("u0", "g_f", "v0"))
    g.add_argument("--riesz", action="store_true", default=None,
                   help="return the lumped-mass L2 Riesz representative")
    t = common(sub.add_parser("taylor", help="Taylor remainder ladder"))
    t.add_argument("--control", choices=("u0", "g_f"))
    c = common(sub.add_parser("converge", help="convergence order studies"))
    c.add_argument("--kind", choices=("ode", "split"), default="ode")
    b = common(sub.add_parser("bench", help="forward/adjoint timing and scaling"))
    b.add_argument("--points", type=int, help="point count for thread scaling")
    b.add_argument("--scaling", action="store_true", help="run thread-scaling rows")
    return parser


def _build_config(args) -> ExperimentConfig:
    overrides = {}
    if args.config:
        overrides.update(load_config_file(args.config))
    for key in ("experiment", "nx", "horizon", "kappa", "theta", "scheme",
                "threads", "outdir", "seed", "chunk", "no_timing", "points",
                "control", "riesz"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    experiment = overrides.pop("experiment", "mito")
    if getattr(args, "command", "") == "converge":
        experiment = f"converge-{args.kind}"
        return ExperimentConfig(experiment=experiment, **overrides)
    return default_config(experiment, **overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = _build_config(args)
    if args.command == "converge":
        if args.kind == "ode":
            _, observed = run_converge_ode(cfg)
            for scheme, order in observed.items():
                print(f"converge-ode {scheme}: observed order {order:.3f}")
        else:
            _, observed = run_converge_split(cfg)
            for theta, order in observed.items():
                print(f"converge-split theta={theta}: observed order {order:.3f}")
        print(f"reports written to {cfg.outdir}")
        return 0
    if args.command == "bench":
        res = run_bench(cfg)
        print(
            f"bench {cfg.experiment}: forward {res['t_forward']:.3f}s, "
            f"adjoint {res['t_adjoint']:.3f}s, gradient {res['t_gradient']:.3f}s, "
            f"ODE-phase adjoint/forward ratio {res['ode_ratio']:.2f}"
        )
        if args.scaling:
            sc = run_thread_scaling(cfg)
            state = "identical" if sc["identical"] else "DIVERGENT"
            print(
                f"thread scaling on {cfg.points} points: results {state}, "
                f"8-thread speedup {sc['speedup']:.2f}x"
            )
        print(f"reports written to {cfg.outdir}")
        return 0
    runner = run_fhn2d if cfg.experiment == "fhn2d" else run_mito
    res = runner(cfg)
    print(f"{cfg.experiment}: J = {res['J']!r}")
    rep = res["taylor"]
    print("taylor R0 orders:", " ".join(f"{o:.3f}" for o in rep.r0_orders[1:]))
    print("taylor R1 orders:", " ".join(f"{o:.3f}" for o in rep.r1_orders[1:]))
    if "grad_gf" in res:
        print(f"dJ/dg_f = {res['grad_gf']!r}, dJ/d(dummy) = {res['grad_dummy']!r}")
    print(f"reports written to {cfg.outdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
