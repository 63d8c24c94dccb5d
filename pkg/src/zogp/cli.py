"""Command line entry point: ``zogp <command> [options]``.

Exit codes: 0 success, 1 solver or check failure, 2 usage or config error.
"""

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ZogpError

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


def _common(p):
    p.add_argument("--config", type=Path, help="TOML experiment configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=Path, help="output directory (default: the configured one)")
    p.add_argument("--mode", choices=("nominal", "zero_order", "naive"), help="controller / solver mode")
    p.add_argument("--workers", type=int, help="worker count for stage evaluations (env ZOGP_WORKERS)")
    p.add_argument("--plant-noise", type=float, dest="plant_noise",
                   help="std of Gaussian plant noise on the disturbance channel")
    p.add_argument("--n-mass", type=int, dest="n_mass", help="chain size for single-size commands")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="zogp", description="Zero-order GP-MPC experiments on a hanging chain.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="record GP training data from nominal MPC closed loops")
    _common(p)
    p = sub.add_parser("closed-loop", help="simulate the chain under MPC")
    _common(p)
    p.add_argument("--data", type=Path, help="GP training data CSV (default: no data)")
    p.add_argument("--steps", type=int, help="closed-loop steps")
    p = sub.add_parser("scaling", help="per-iteration timing against n_x")
    _common(p)
    p = sub.add_parser("profile", help="timing share per solver category")
    _common(p)
    p = sub.add_parser("check", help="run the built-in property checks")
    _common(p)
    return parser


def _resolve_config(args):
    from .harness import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config is not None else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    if args.plant_noise is not None:
        if args.plant_noise < 0:
            raise InvalidArgumentError("--plant-noise must be non-negative")
        changes["plant_noise"] = args.plant_noise
    workers = args.workers
    env = os.environ.get("ZOGP_WORKERS")
    if env:
        try:
            workers = int(env)
        except ValueError as exc:
            raise InvalidArgumentError(f"ZOGP_WORKERS must be an integer, got {env!r}") from exc
    if workers is not None:
        changes["workers"] = (workers,)
    if args.mode is not None and args.command in ("scaling",):
        changes["modes"] = (args.mode,)
    if args.n_mass is not None:
        changes["chain"] = dataclasses.replace(cfg.chain, n_mass=args.n_mass)
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _gen_data(cfg, args, out):
    from .gp import write_dataset_csv
    from .harness import generate_training_data

    n_mass = cfg.chain.n_mass
    data = generate_training_data(cfg, n_mass)
    path = out / f"data_n{n_mass}_seed{cfg.seed}.csv"
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(data, path, dict(data.meta, config=cfg.digest()))
    print(f"wrote {len(data)} rows to {path} (skipped starts: {data.meta['skipped']})")
    return EXIT_OK


def _closed_loop(cfg, args, out):
    from .gp import read_dataset_csv
    from .harness import fit_chain_gp, run_closed_loop, write_csv

    n_mass = cfg.chain.n_mass
    mode = args.mode or "zero_order"
    gp = None
    if args.data is not None:
        if not args.data.is_file():
            raise FileNotFoundError(f"data file not found: {args.data}")
        gp = fit_chain_gp(cfg, read_dataset_csv(args.data), n_mass)
    log = run_closed_loop(cfg, mode, gp, steps=args.steps)
    rows = []
    for k in range(len(log)):
        rows.append([k, *(f"{v:.9e}" for v in log.inputs[k]), f"{np.min(log.margins[k]):.9e}",
                     log.iterations[k], f"{log.solve_seconds[k]:.6e}"])
    nu = log.inputs.shape[1]
    header = ["step", *(f"u_{j + 1}" for j in range(nu)), "min_margin", "sqp_iterations", "seconds"]
    path = write_csv(out / f"closed_loop_{mode}.csv", header, rows, cfg, {"mode": mode, "n_mass": n_mass})
    print(f"{mode}: min wall margin {log.min_margin:.4e} m, violations {log.violations}, "
          f"solver failures {log.failures}; wrote {path}")
    return EXIT_SOLVER if log.failures else EXIT_OK


def _scaling(cfg, args, out):
    from .harness import run_scaling_experiment, scaling_summary

    def progress(r):
        tag = "timed out" if r.timed_out else f"{r.seconds:.3e} s"
        print(f"  n_x={r.n_x:3d} {r.mode:10s} D={r.data_size:<5d} workers={r.workers}: {tag}", flush=True)

    rows = run_scaling_experiment(cfg, out, progress=progress)
    summ = scaling_summary(rows)
    for mode, slope in summ["slopes"].items():
        print(f"log-log slope {mode}: {slope:.2f}")
    if summ["speedup"] is not None:
        print(f"speed-up at n_x={summ['speedup_n_x']}: {summ['speedup']:.1f}x")
    print(f"wrote {out / 'scaling.csv'} and {out / 'scaling.svg'}")
    return EXIT_OK


def _profile(cfg, args, out):
    from .harness import run_profile_experiment

    n_mass = args.n_mass if args.n_mass is not None else None

    def progress(d_size, workers, shares):
        parts = ", ".join(f"{c} {100 * v:.1f}%" for c, v in shares.items())
        print(f"  D={d_size} workers={workers}: {parts}", flush=True)

    run_profile_experiment(cfg, out, n_mass=n_mass, progress=progress)
    print(f"wrote {out / 'profile.csv'}")
    return EXIT_OK


def _check(cfg, args, out):
    from .checks import run_property_suite

    results = run_property_suite(cfg.seed)
    for r in results:
        print(r.line())
    n_ok = sum(r.passed for r in results)
    print(f"{n_ok}/{len(results)} checks passed")
    return EXIT_OK if n_ok == len(results) else EXIT_SOLVER


_COMMANDS = {"gen-data": _gen_data, "closed-loop": _closed_loop, "scaling": _scaling, "profile": _profile,
             "check": _check}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    try:
        return _COMMANDS[args.command](cfg, args, out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ZogpError as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
