"""CSV result files.

Every file starts with ``#`` comment lines carrying the tool version and a
JSON metadata record (the resolved experiment config, or histogram
parameters), followed by a plain CSV table. Floats are written with ``repr``
so values round-trip exactly and identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import Intrinsics, Pose
from .simulation import ExperimentResult, Histogram2D, SweepResult, TrialStatistics

TRACE_METRIC_KINDS = ("re", "te")


def column_token(method: str) -> str:
    """``"dlt-decomp"`` -> ``"dltdecomp"``."""
    return "".join(ch for ch in method if ch.isalnum())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(value)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# mlopt {__version__}\n")
    buf.write("# meta: " + json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_table(path: Path) -> tuple[dict, list[dict[str, str]]]:
    """Return ``(meta, rows)``; rows are dicts of raw strings."""
    meta: dict = {}
    body = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# meta: "):
            meta = json.loads(line[len("# meta: ") :])
        elif not line.startswith("#"):
            body.append(line)
    return meta, list(csv.DictReader(body))


def trace_header(methods: Sequence[str]) -> list[str]:
    cols = ["iter", "cond", "he_mean", "he_std"]
    for m in methods:
        tok = column_token(m)
        for kind in TRACE_METRIC_KINDS:
            cols += [f"{kind}_{tok}_mean", f"{kind}_{tok}_std"]
    return cols


def _stat_cells(stats: dict[str, TrialStatistics] | None, methods: Sequence[str], he_scale: float) -> list:
    if stats is None:
        return [None] * (2 + 4 * len(methods))
    he = stats["he"]
    cells = [he.mean * he_scale, he.std * he_scale]
    for m in methods:
        for kind in TRACE_METRIC_KINDS:
            s = stats[f"{kind}:{m}"]
            cells += [s.mean, s.std]
    return cells


def write_trace(path: Path, result: ExperimentResult, methods: Sequence[str], K: Intrinsics, meta: dict) -> Path:
    """One row per iteration; Monte-Carlo columns are blank where not evaluated.

    HE is written in px^2 (normalized units times fx^2).
    """
    he_scale = K.fx**2
    rows = []
    for i, c in enumerate(result.trace.cond):
        rows.append([i, c, *_stat_cells(result.stats.get(i), methods, he_scale)])
    return write_table(path, trace_header(methods), rows, meta)


def write_point_snapshots(path: Path, points: Sequence[np.ndarray], meta: dict) -> Path:
    rows = ([i, k, p[0], p[1]] for i, pts in enumerate(points) for k, p in enumerate(pts))
    return write_table(path, ["iter", "point", "x", "y"], rows, meta)


def write_final_points(path: Path, runs: Sequence[tuple[str, np.ndarray, str]], meta: dict) -> Path:
    """One row per point of each (run_id, points, optimizer status) triple."""
    rows = ([run_id, status, len(pts), k, p[0], p[1]] for run_id, pts, status in runs for k, p in enumerate(pts))
    return write_table(path, ["run_id", "status", "n", "point", "x", "y"], rows, meta)


def read_final_points(path: Path) -> list[tuple[str, np.ndarray, str]]:
    """(run_id, points, optimizer status) triples in file order."""
    _, rows = read_table(path)
    runs: dict[str, list[tuple[int, float, float]]] = {}
    status: dict[str, str] = {}
    for row in rows:
        runs.setdefault(row["run_id"], []).append((int(row["point"]), float(row["x"]), float(row["y"])))
        status[row["run_id"]] = row["status"]
    out = []
    for run_id, pts in runs.items():
        pts.sort()
        out.append((run_id, np.array([[x, y] for _, x, y in pts]), status[run_id]))
    return out


def write_sweep(out_dir: Path, result: SweepResult, methods: Sequence[str], K: Intrinsics, meta: dict) -> list[Path]:
    """Per-cell table, per-(n, conditioning, metric) summary and final configurations."""
    out_dir = Path(out_dir)
    he_scale = K.fx**2
    stat_cols = trace_header(methods)[2:]
    cell_header = ["pose_index", "n", "init_index", "status", "optimizer_status", "iterations", "cond_initial", "cond_final"]
    cell_header += [f"initial_{c}" for c in stat_cols] + [f"final_{c}" for c in stat_cols]
    cell_rows = []
    for c in result.cells:
        initial = _stat_cells(c.stats_initial or None, methods, he_scale)
        final = _stat_cells(c.stats_final, methods, he_scale)
        cell_rows.append([c.pose_index, c.n, c.init_index, c.status, c.optimizer_status, c.iterations, c.cond_initial, c.cond_final, *initial, *final])

    summary_rows = []
    for row in result.aggregate():
        scale = he_scale if row["metric"] == "he" else 1.0
        summary_rows.append([row["n"], row["conditioning"], row["metric"], row["mean"] * scale, row["std"] * scale, row["cells"]])

    finals = [(f"p{c.pose_index}_n{c.n}_i{c.init_index}", c.final_points, c.optimizer_status) for c in result.cells if c.final_points is not None]
    return [
        write_table(out_dir / "sweep_cells.csv", cell_header, cell_rows, meta),
        write_table(out_dir / "sweep_summary.csv", ["n", "conditioning", "metric", "mean", "std", "cells"], summary_rows, meta),
        write_final_points(out_dir / "final_points.csv", finals, meta),
    ]


def write_histogram(path: Path, hist: Histogram2D, meta: dict) -> Path:
    meta = dict(meta, bins=int(hist.counts.shape[0]), n=hist.n, radius=float(hist.edges[-1]))
    e = hist.edges
    rows = (
        [ix, iy, e[ix], e[ix + 1], e[iy], e[iy + 1], int(hist.counts[ix, iy])]
        for ix in range(hist.counts.shape[0])
        for iy in range(hist.counts.shape[1])
    )
    return write_table(path, ["ix", "iy", "x_lo", "x_hi", "y_lo", "y_hi", "count"], rows, meta)


def read_histogram(path: Path) -> Histogram2D:
    meta, rows = read_table(path)
    bins = int(meta["bins"])
    counts = np.zeros((bins, bins), dtype=np.int64)
    for row in rows:
        counts[int(row["ix"]), int(row["iy"])] = int(row["count"])
    edges = np.linspace(-meta["radius"], meta["radius"], bins + 1)
    return Histogram2D(edges=edges, counts=counts, n=int(meta["n"]))


def write_poses(path: Path, poses: Sequence[Pose], radii: Sequence[float], valid: Sequence[bool], meta: dict) -> Path:
    header = ["index", "radius", "cx", "cy", "cz"]
    header += [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz", "valid"]
    rows = (
        [k, rad, *p.center, *p.R.ravel(), *p.T, ok]
        for k, (p, rad, ok) in enumerate(zip(poses, radii, valid))
    )
    return write_table(path, header, rows, meta)


def read_poses(path: Path) -> list[Pose]:
    _, rows = read_table(path)
    out = []
    for row in rows:
        R = np.array([[float(row[f"r{i}{j}"]) for j in range(3)] for i in range(3)])
        T = np.array([float(row[k]) for k in ("tx", "ty", "tz")])
        out.append(Pose(R, T))
    return out
