"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 solver nonconvergence,
4 IO failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import parse_config
from .driver import initial_mesh, run_case, run_convergence
from .errors import ConfigError, SolveError
from .output import TimeSeriesWriter, write_vtk


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="chns",
        description="Adaptive-octree finite-element solver for two-phase "
                    "Cahn-Hilliard Navier-Stokes flow")
    ap.add_argument("--config", required=True, help="path to the run config")
    ap.add_argument("--case", help="override the case type from the config")
    ap.add_argument("--steps", type=int, help="override the step count")
    ap.add_argument("--out", help="override the output directory")
    ap.add_argument("--threads", type=int, help="worker threads for assembly "
                    "partitions (CHNS_THREADS overrides)")
    ap.add_argument("--dry-run", action="store_true",
                    help="parse the config, build the mesh, report sizes, exit")
    ap.add_argument("--convergence", choices=("temporal", "spatial"),
                    help="run a manufactured-solution convergence study")
    return ap


def _load_config(args):
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
    rc = parse_config(text, path=args.config)
    if args.case:
        raw = dict(rc.raw_case)
        raw["type"] = args.case
        from .config import _build_case
        rc.case = _build_case(raw)
    if args.steps is not None:
        rc.case.n_steps = args.steps
    if args.out:
        rc.output_dir = args.out
    if args.threads is not None:
        rc.threads = args.threads
    env_threads = os.environ.get("CHNS_THREADS")
    if env_threads:
        rc.threads = int(env_threads)
    return rc


def main(argv=None) -> int:
    ap = build_arg_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        rc = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.dry_run:
        tree, table = initial_mesh(rc.case)
        print(f"case {rc.case.case_id}: {tree.n_leaves} leaves, "
              f"{table.n_nodes} nodes ({table.n_hanging} hanging), "
              f"dt = {rc.case.dt:.6g}, {rc.case.n_steps} steps")
        return 0

    try:
        os.makedirs(rc.output_dir, exist_ok=True)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4

    try:
        if args.convergence:
            report = run_convergence(args.convergence, solvers=rc.solvers)
            path = os.path.join(rc.output_dir,
                                f"{rc.prefix}_convergence_{args.convergence}.csv")
            with open(path, "w") as fh:
                fh.write(report.to_csv())
            print(f"wrote {path}")
            for name, slope in sorted(report.slopes.items()):
                print(f"  slope[{name}] = {slope:.3f}")
            if report.failures:
                print(f"  failures: {report.failures}", file=sys.stderr)
                return 3
            return 0
        return _run_simulation(rc)
    except SolveError as exc:
        print(f"solver failure in block {exc.block!r}: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


def _run_simulation(rc) -> int:
    csv_path = os.path.join(rc.output_dir, f"{rc.prefix}_timeseries.csv")
    state_box = {}

    def dump_fields(step_index, state, stepper):
        fields = {
            "velocity": state.u_k,
            "pressure": state.p_k,
            "phi": state.phi_k,
            "mu": state.mu_k,
        }
        if stepper.d == 2:
            omega, q = stepper.vorticity_q(state)
            fields["vorticity"] = omega
            fields["Q"] = q
        path = os.path.join(rc.output_dir,
                            f"{rc.prefix}_{step_index + 1:06d}.vtk")
        write_vtk(stepper.tree, stepper.table, fields, path)

    # Peek at the initial mass for the drift column.
    tree, table = initial_mesh(rc.case)
    from .driver import build_stepper, initial_state
    stepper0 = build_stepper(rc.case, tree, table, solvers=rc.solvers,
                             options=rc.scheme_options())
    mass0 = stepper0.diagnostics(initial_state(rc.case, stepper0))["mass"]
    del stepper0, tree, table

    with TimeSeriesWriter(csv_path, initial_mass=mass0) as writer:
        def on_step(k, state, rec, stepper):
            writer.write_row(rec)
            state_box["stepper"] = stepper
            state_box["state"] = state
            if rc.write_vtk and (k + 1) % rc.cadence == 0:
                dump_fields(k, state, stepper)

        result = run_case(rc.case, solvers=rc.solvers,
                          options=rc.scheme_options(), on_step=on_step)
    n = len(result.records)
    print(f"completed {n} steps to t = {result.state.t:.6g}; "
          f"wrote {csv_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
