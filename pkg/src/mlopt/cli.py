"""``mlopt`` command-line entry point.

Exit codes: 0 on success, 2 for configuration or validation errors, 3 for
runtime and numerical failures.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import InfeasibleDistribution, MixedN, MloptError
from .simulation import (
    aggregate_histogram,
    align_square,
    circle_visible,
    fronto_parallel_pose,
    generate_pose_distribution,
    hull_side_ratio,
    run_optimization_experiment,
    select_poses,
    sweep_n_points,
)
from . import results

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    """Bad arguments or inputs; mapped to exit code 2."""


def _default_jobs() -> int | None:
    raw = os.environ.get("MLOPT_JOBS")
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"MLOPT_JOBS must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError("MLOPT_JOBS must be >= 1")
    return value


def _resolve(args) -> ExperimentConfig:
    overrides = {"base_seed": getattr(args, "seed", None), "output_dir": getattr(args, "out", None)}
    if getattr(args, "n", None) is not None:
        overrides["n"] = args.n
    jobs = getattr(args, "jobs", None) or _default_jobs()
    if jobs is not None:
        overrides["jobs"] = jobs
    return load_config(args.config, **overrides)


# Where results go and how many workers compute them do not change the
# numbers, so they stay out of the provenance record; that keeps reruns
# byte-identical across output directories and job counts.
_EXECUTION_KEYS = ("output_dir", "jobs")


def _meta(cfg: ExperimentConfig, **extra) -> dict:
    resolved = json.loads(cfg.canonical_json())
    meta = {"config": {k: v for k, v in resolved.items() if k not in _EXECUTION_KEYS}}
    meta.update(extra)
    return meta


def cmd_optimize(args) -> int:
    cfg = _resolve(args)
    K = cfg.intrinsics()
    if args.pose_index is not None:
        poses = generate_pose_distribution(cfg.pose_config(), K, cfg.bound_radius)
        if not 0 <= args.pose_index < len(poses):
            raise UsageError(f"--pose-index must be in [0, {len(poses) - 1}]")
        pose, label, pose_tag = poses[args.pose_index], args.pose_index, f"pose {args.pose_index}"
    else:
        pose, label, pose_tag = fronto_parallel_pose(cfg.fronto_parallel_distance), 0, "fronto-parallel"

    result = run_optimization_experiment(
        pose,
        cfg.n,
        cfg.optimizer_config(),
        cfg.noise_model(),
        cfg.runs,
        K=K,
        methods=cfg.methods,
        eval_every=cfg.eval_every,
        seed=(cfg.base_seed, label, 0),
        refiner=cfg.refiner_config(),
    )
    out = Path(cfg.output_dir)
    meta = _meta(cfg, command="optimize", pose=pose_tag, status=result.trace.status, best_iter=result.trace.best_index)
    results.write_trace(out / "trace.csv", result, cfg.methods, K, meta)
    results.write_point_snapshots(out / "points.csv", result.trace.points, meta)
    run_id = f"p{label}_n{cfg.n}_i0" if args.pose_index is not None else f"fronto_n{cfg.n}_i0"
    results.write_final_points(out / "final_points.csv", [(run_id, result.trace.final_points, result.trace.status)], meta)
    trace = result.trace
    print(f"{trace.status}: c {trace.initial_cond:.6g} -> {trace.final_cond:.6g} in {len(trace) - 1} iterations; wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    K = cfg.intrinsics()
    poses = generate_pose_distribution(cfg.pose_config(), K, cfg.bound_radius)
    idx = select_poses(poses, cfg.max_poses)
    result = sweep_n_points(
        [poses[i] for i in idx],
        cfg.n_values,
        cfg.inits_per_pose,
        cfg.optimizer_config(),
        cfg.noise_model(),
        cfg.runs,
        K=K,
        methods=cfg.methods,
        base_seed=cfg.base_seed,
        pose_indices=idx,
        refiner=cfg.refiner_config(),
        jobs=cfg.jobs,
    )
    out = Path(cfg.output_dir)
    results.write_sweep(out, result, cfg.methods, K, _meta(cfg, command="sweep", pose_indices=idx))
    failed = sum(c.status != "ok" for c in result.cells)
    print(f"{len(result.cells)} cells ({failed} failed); wrote {out}")
    return EXIT_OK


def cmd_histogram(args) -> int:
    paths = sorted(glob.glob(args.input))
    if not paths:
        raise UsageError(f"no files match {args.input!r}")
    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    runs = [(f"{Path(p).as_posix()}:{rid}", pts, st) for p in paths for rid, pts, st in results.read_final_points(p)]
    if not args.all:
        runs = [r for r in runs if r[2] == "converged"]
    if args.n is not None:
        runs = [r for r in runs if len(r[1]) == args.n]
    if not runs:
        raise UsageError("no configurations to histogram" + ("" if args.all else " (no converged runs; try --all)"))
    hist = aggregate_histogram([pts for _, pts, _ in runs], args.bins, args.radius)
    meta = {"command": "histogram", "inputs": [Path(p).as_posix() for p in paths], "all_runs": args.all}
    out = Path(args.out)
    results.write_histogram(out, hist, meta)

    listing = []
    for rid, pts, status in runs:
        theta = align_square(pts, args.radius)
        ratio = hull_side_ratio(pts) if len(pts) >= 3 else float("nan")
        listing.extend([rid, status, k, p[0], p[1], theta, ratio] for k, p in enumerate(pts))
    results.write_table(
        out.with_name(out.stem + "_runs.csv"), ["run_id", "status", "point", "x", "y", "square_angle", "hull_side_ratio"], listing, meta
    )
    print(f"{len(runs)} configurations, n = {hist.n}; wrote {out}")
    return EXIT_OK


def cmd_poses(args) -> int:
    cfg = _resolve(args)
    K = cfg.intrinsics()
    pc = cfg.pose_config()
    poses = generate_pose_distribution(pc, K, cfg.bound_radius)
    target = np.asarray(pc.look_at, dtype=float)
    radii = [float(np.linalg.norm(p.center - target)) for p in poses]
    valid = [circle_visible(p, K, cfg.bound_radius, pc.boundary_samples) for p in poses]
    results.write_poses(Path(args.out), poses, radii, valid, _meta(cfg, command="poses"))
    print(f"{len(poses)} poses ({sum(valid)} valid); wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlopt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mlopt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="optimize one configuration and trace Monte-Carlo accuracy")
    p.add_argument("--config", type=Path, help="JSON experiment manifest (defaults if omitted)")
    where = p.add_mutually_exclusive_group()
    where.add_argument("--pose-index", type=int, help="pose from the configured distribution")
    where.add_argument("--fronto-parallel", action="store_true", help="camera facing the marker (default)")
    p.add_argument("--n", type=int, help="number of control points")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", help="random versus optimized configurations for every n")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, help="worker processes (default: $MLOPT_JOBS or the config)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("histogram", help="2D histogram of final configurations")
    p.add_argument("--in", dest="input", required=True, help="glob of final_points.csv files")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--radius", type=float, default=0.15, help="bounding disk radius")
    p.add_argument("--n", type=int, help="keep only configurations with this many points")
    p.add_argument("--all", action="store_true", help="include runs that did not converge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("poses", help="write the camera pose distribution")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_poses)
    return parser


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(x) for x in e['loc']) or 'config'}: {e['msg'].removeprefix('Value error, ')}" for e in exc.errors())


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"mlopt: invalid config: {_validation_message(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, MixedN, InfeasibleDistribution, json.JSONDecodeError, FileNotFoundError, ValueError) as exc:
        print(f"mlopt: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MloptError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"mlopt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
