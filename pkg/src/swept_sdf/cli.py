"""
Command line interface of swept_sdf.

Subcommands::

    swept-sdf plan --config scenario.ini [--output-dir DIR]
    swept-sdf query MESH TRAJECTORY POINTS [--output-dir DIR]
    swept-sdf check MESH TRAJECTORY CLOUD [--dt 1e-3] [--margin 0.02]
    swept-sdf sweep-grid MESH TRAJECTORY --bounds X0 Y0 Z0 X1 Y1 Z1 --resolution R
    swept-sdf bench --config scenario.ini [--repetitions 5]

Exit codes: 0 success, 1 invalid input, 2 the planner did not converge to a
collision-free trajectory, 3 the clearance check failed.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from swept_sdf import __version__
from swept_sdf.exceptions import InputError, SolverError, SweptSdfError
from swept_sdf.geometry import MeshDistanceIndex, load_mesh
from swept_sdf.logging_config import setup_logging
from swept_sdf.objective import PlannerConfig
from swept_sdf.scenario import load_scenario, read_cloud
from swept_sdf.solver import initial_guess, plan
from swept_sdf.sweep import (
    MotionOracle,
    SweepOptions,
    SweptBatch,
    SweptSdfEngine,
    dense_clearance,
    sweep_grid,
    write_grid,
    write_slice_csv,
)
from swept_sdf.trajectory import Trajectory, minco_construct

__author__ = "swept_sdf contributors"
__copyright__ = "swept_sdf contributors"
__license__ = "MIT"

_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_SOLVER = 2
EXIT_CHECK = 3

THREADS_ENV = "SWEPT_SDF_THREADS"


def _json_safe(value):
    """Replace non-finite floats so the output is strict JSON."""
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _write_json(path, data):
    Path(path).write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n")


def _output_dir(value):
    if value is None:
        return None
    path = Path(value)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _threads(value):
    if value is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            value = int(raw)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise InputError(f"thread count must be at least 1, got {value}")
    return value


def _sweep_options(args, base=None):
    base = base or SweepOptions()
    if args.seed_stride is None:
        return base
    return replace(base, seed_stride=args.seed_stride)


def _percentiles(samples):
    samples = np.asarray(samples, dtype=np.float64) * 1e6
    p50, p90, p99 = np.percentile(samples, [50, 90, 99])
    return {"p50_us": p50, "p90_us": p90, "p99_us": p99, "mean_us": float(samples.mean())}


# ---- Commands ----
# Each command takes the parsed namespace and returns an exit code; library
# exceptions propagate to :func:`main`.


def cmd_plan(args):
    """Plan a trajectory for a scenario and write trajectory, history and summary."""
    scenario = load_scenario(args.config)
    out = _output_dir(args.output_dir or scenario.output_dir or ".")
    result = plan(
        scenario.load_mesh(),
        scenario.load_cloud(),
        scenario.start,
        scenario.goal,
        scenario.planner,
        scenario.solver,
        _sweep_options(args, scenario.sweep),
        threads=_threads(args.threads),
    )
    result.trajectory.save(out / "trajectory.json")
    history = pd.DataFrame([report.to_dict() for report in result.history])
    history.insert(0, "iteration", np.arange(len(history)))
    history.to_json(out / "cost_history.jsonl", orient="records", lines=True)
    summary = result.to_summary()
    _write_json(out / "summary.json", summary)
    print(json.dumps(_json_safe(summary), sort_keys=True))
    if result.failed:
        _logger.warning("Planner did not reach a collision-free converged trajectory")
        return EXIT_SOLVER
    return EXIT_OK


def cmd_query(args):
    """Swept-volume SDF of every point as CSV rows ``x, y, z, f_star, t_star, at_boundary``."""
    index = MeshDistanceIndex(load_mesh(args.mesh))
    traj = Trajectory.load(args.trajectory)
    points = read_cloud(args.points)
    if len(points):
        engine = SweptSdfEngine(index, traj, _sweep_options(args))
        batch = engine.query_many(points, threads=_threads(args.threads))
    else:
        batch = SweptBatch.empty()
    frame = batch.to_frame(points)
    out = _output_dir(args.output_dir)
    if out is None:
        sys.stdout.write(frame.to_csv(index=False, float_format="%.17g"))
    else:
        frame.to_csv(out / "query.csv", index=False, float_format="%.17g")
    return EXIT_OK


def cmd_check(args):
    """Dense time-sampled clearance of a trajectory against a cloud."""
    if not args.dt > 0:
        raise InputError(f"--dt must be positive, got {args.dt}")
    margin = args.margin if args.margin is not None else PlannerConfig().safety_margin
    index = MeshDistanceIndex(load_mesh(args.mesh))
    traj = Trajectory.load(args.trajectory)
    report = dense_clearance(index, MotionOracle(traj), read_cloud(args.cloud), args.dt)
    data = {**report.to_dict(), "margin": margin, "passed": bool(report.min_clearance >= margin)}
    print(json.dumps(_json_safe(data), sort_keys=True))
    out = _output_dir(args.output_dir)
    if out is not None:
        _write_json(out / "check.json", data)
    return EXIT_OK if data["passed"] else EXIT_CHECK


def cmd_sweep_grid(args):
    """Sample the swept SDF on a grid and optionally export one z-slice."""
    if args.resolution is None or not args.resolution > 0:
        raise InputError(f"--resolution must be positive, got {args.resolution}")
    index = MeshDistanceIndex(load_mesh(args.mesh))
    traj = Trajectory.load(args.trajectory)
    engine = SweptSdfEngine(index, traj, _sweep_options(args))
    bounds = np.reshape(args.bounds, (2, 3))
    grid = sweep_grid(engine, bounds, args.resolution, threads=_threads(args.threads))
    out = _output_dir(args.output_dir or ".")
    write_grid(grid, out / "sweep.grid")
    if args.slice_z is not None:
        write_slice_csv(grid, out / "slice.csv", args.slice_z)
    return EXIT_OK


def cmd_bench(args):
    """Per-query latency of cold and warm-started queries, plus one planning run."""
    if args.repetitions < 1:
        raise InputError(f"--repetitions must be at least 1, got {args.repetitions}")
    scenario = load_scenario(args.config)
    mesh = scenario.load_mesh()
    cloud = scenario.load_cloud()
    if args.points is not None:
        cloud = cloud[: args.points]
    index = MeshDistanceIndex(mesh)
    waypoints, durations = initial_guess(scenario.start, scenario.goal, scenario.planner)
    traj = minco_construct(waypoints, durations, scenario.start, scenario.goal)
    options = _sweep_options(args, scenario.sweep)

    cold, warm = [], []
    for _ in range(args.repetitions):
        engine = SweptSdfEngine(index, traj, options)
        for key, point in enumerate(cloud):
            tic = time.perf_counter()
            engine.swept_sdf(point, key)
            cold.append(time.perf_counter() - tic)
        for key, point in enumerate(cloud):
            tic = time.perf_counter()
            engine.swept_sdf(point, key)
            warm.append(time.perf_counter() - tic)

    data = {"queries": len(cloud) * args.repetitions, "repetitions": args.repetitions}
    if cold:
        data["cold"] = _percentiles(cold)
        data["warm"] = _percentiles(warm)
    if not args.skip_plan:
        tic = time.perf_counter()
        plan(
            mesh, cloud, scenario.start, scenario.goal, scenario.planner, scenario.solver, options,
            threads=_threads(args.threads), certify=False,
        )
        data["plan_seconds"] = time.perf_counter() - tic
    print(json.dumps(_json_safe(data), sort_keys=True))
    return EXIT_OK


# ---- CLI ----
# The functions defined in this section are wrappers around the commands above
# allowing them to be called directly from the terminal as a CLI executable.


def parse_args(args):
    """Parse command line parameters

    Args:
      args (List[str]): command line parameters as list of strings
          (for example  ``["--help"]``).

    Returns:
      :obj:`argparse.Namespace`: command line parameters namespace
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-v",
        "--verbose",
        dest="loglevel",
        help="set loglevel to INFO",
        action="store_const",
        const=logging.INFO,
    )
    common.add_argument(
        "-vv",
        "--very-verbose",
        dest="loglevel",
        help="set loglevel to DEBUG",
        action="store_const",
        const=logging.DEBUG,
    )
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads (default: ${THREADS_ENV} or 1)",
    )
    common.add_argument("--seed-stride", type=float, default=None, help="argmin seed stride in seconds")
    common.add_argument("--output-dir", default=None, help="directory for output files")

    parser = argparse.ArgumentParser(description="Swept-volume signed distance and trajectory planning")
    parser.add_argument(
        "--version",
        action="version",
        version=f"swept_sdf {__version__}",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("plan", parents=[common], help="plan a trajectory for a scenario")
    p.add_argument("-c", "--config", required=True, help="scenario file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("query", parents=[common], help="swept SDF of points along a trajectory")
    p.add_argument("mesh", help="robot mesh (OBJ or STL)")
    p.add_argument("trajectory", help="trajectory JSON")
    p.add_argument("points", help="points file, one 'x y z' per line")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("check", parents=[common], help="dense clearance check")
    p.add_argument("mesh")
    p.add_argument("trajectory")
    p.add_argument("cloud")
    p.add_argument("--dt", type=float, default=1e-3, help="time step in seconds")
    p.add_argument("--margin", type=float, default=None, help="required clearance in meters")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep-grid", parents=[common], help="sample the swept SDF on a grid")
    p.add_argument("mesh")
    p.add_argument("trajectory")
    p.add_argument(
        "--bounds", type=float, nargs=6, required=True, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1")
    )
    p.add_argument("--resolution", type=float, required=True, help="grid spacing in meters")
    p.add_argument("--slice-z", type=float, default=None, help="also export the slice nearest this height")
    p.set_defaults(func=cmd_sweep_grid)

    p = sub.add_parser("bench", parents=[common], help="query latency and planning time")
    p.add_argument("-c", "--config", required=True, help="scenario file")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--points", type=int, default=None, help="use only the first N cloud points")
    p.add_argument("--skip-plan", action="store_true", help="do not time a planning run")
    p.set_defaults(func=cmd_bench)
    return parser.parse_args(args)


def main(args):
    """Run one subcommand and return its exit code.

    Library errors are reported on ``stderr`` as ``error: ...``; solver errors map to
    exit code 2, all others to exit code 1. Anything else is a bug and propagates.

    Args:
      args (List[str]): command line parameters as list of strings
          (for example  ``["query", "robot.obj", "traj.json", "points.xyz"]``).
    """
    args = parse_args(args)
    setup_logging(args.loglevel)
    _logger.debug("Running %s", args.command)
    try:
        code = args.func(args)
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SweptSdfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    _logger.info("%s finished with exit code %d", args.command, code)
    return code


def run():
    """Calls :func:`main` passing the CLI arguments extracted from :obj:`sys.argv`

    This function can be used as entry point to create console scripts with setuptools.
    """
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    run()
