"""Synthetic-camera experiments: pose sets, noise, Monte-Carlo statistics and sweeps.

Randomness is fully derived from a base seed. Every independent stream gets
its own generator keyed by ``(tag, base_seed, *indices)`` so results do not
depend on evaluation order or on how work is split across processes.
"""

from __future__ import annotations

import functools
import math
from collections.abc import Collection, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .dlt import RANK_TOL, solve_dlt_batch
from .errors import InfeasibleDistribution, MixedN, MloptError, SamplerExhausted
from .geometry import Intrinsics, Pose, lift, normalized_to_pixel, pixel_to_normalized, project
from .optimizer import (
    MIN_SEPARATION,
    OptimizationTrace,
    OptimizerConfig,
    PlanarPointSet,
    objective_batch,
    optimize,
)
from .pose_est import (
    METHODS,
    RefinerConfig,
    homography_error_batch,
    rotation_error,
    translation_error,
    validation_grid,
)

TAG_INIT = 1
TAG_NOISE = 2
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
DEFAULT_METHODS = ("dlt-decomp", "mre-lm")


@dataclass(frozen=True)
class PoseDistributionConfig:
    """Camera centers on hemispherical shells around the marker.

    The viewing side of the marker is world ``Z < 0``: a camera at
    ``(0, 0, -d)`` looking at the origin has ``R = I`` and ``T = (0, 0, d)``.
    ``min_elevation_deg`` keeps cameras away from grazing views of the plane.
    """

    radii: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25)
    poses_per_radius: int = 100
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hemisphere_only: bool = True
    min_elevation_deg: float = 20.0
    boundary_samples: int = 16

    def __post_init__(self) -> None:
        if not self.radii or any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")
        if self.poses_per_radius < 1:
            raise ValueError("poses_per_radius must be >= 1")
        if not 0.0 <= self.min_elevation_deg < 90.0:
            raise ValueError("min_elevation_deg must be in [0, 90)")

    @property
    def total(self) -> int:
        return len(self.radii) * self.poses_per_radius


@dataclass(frozen=True)
class NoiseModel:
    sigma_px: float = 4.0

    def __post_init__(self) -> None:
        if not self.sigma_px >= 0:
            raise ValueError("sigma_px must be >= 0")


@dataclass(frozen=True)
class TrialStatistics:
    metric: str
    mean: float
    std: float
    runs: int
    failures: int = 0

    @property
    def valid(self) -> bool:
        """False when more than 10% of the runs failed."""
        return self.failures <= 0.1 * self.runs

    @classmethod
    def from_values(cls, metric: str, values: np.ndarray, failed: np.ndarray) -> TrialStatistics:
        good = values[~failed]
        if good.size == 0:
            return cls(metric, math.nan, math.nan, int(values.size), int(failed.sum()))
        return cls(metric, float(np.mean(good)), float(np.std(good)), int(values.size), int(failed.sum()))


@dataclass(frozen=True)
class Histogram2D:
    edges: np.ndarray
    counts: np.ndarray
    n: int

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def trial_rng(base_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), *(int(k) for k in key)]))


def look_at_pose(center, target=(0.0, 0.0, 0.0)) -> Pose:
    """Pose of a camera at ``center`` whose optical axis passes through ``target``.

    Image x follows the world X axis projected onto the image plane (world Y
    when the view direction is parallel to X).
    """
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(z @ ref) > 1 - 1e-9:
        ref = np.array([0.0, 1.0, 0.0])
    x = ref - (ref @ z) * z
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Pose(R, -R @ center)


def fronto_parallel_pose(distance: float = 0.75) -> Pose:
    return Pose(np.eye(3), [0.0, 0.0, distance])


def _view_directions(count: int, min_elevation_deg: float, hemisphere_only: bool, offset: float) -> np.ndarray:
    z_lo = math.sin(math.radians(min_elevation_deg)) if hemisphere_only else -1.0
    k = np.arange(count)
    # Uniform in height keeps the layout equal-area; k = 0 is the zenith.
    h = 1.0 - (1.0 - z_lo) * k / count
    rho = np.sqrt(np.clip(1.0 - h**2, 0.0, None))
    phi = k * GOLDEN_ANGLE + offset
    # Height measured towards the viewing side (world -Z).
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), -h])


def circle_visible(pose: Pose, K: Intrinsics, radius: float, samples: int = 16) -> bool:
    theta = 2 * np.pi * np.arange(samples) / samples
    rim = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    X_c = lift(rim) @ pose.R.T + pose.T
    if np.any(X_c[:, 2] <= 1e-9):
        return False
    px = normalized_to_pixel(K, X_c[:, :2] / X_c[:, 2:3])
    return bool(np.all(K.contains(px)))


def generate_pose_distribution(cfg: PoseDistributionConfig, K: Intrinsics, r: float) -> list[Pose]:
    """Deterministic Fibonacci-spiral camera poses on each radius shell.

    A pose whose view of the bounding circle leaves the image is pushed back
    along its viewing ray (1% steps) until the whole circle fits.
    """
    target = np.asarray(cfg.look_at, dtype=float)
    poses = []
    for shell, radius in enumerate(cfg.radii):
        if radius <= r:
            raise InfeasibleDistribution(f"shell radius {radius} must exceed the marker radius {r}")
        offset = shell * GOLDEN_ANGLE / len(cfg.radii)
        dirs = _view_directions(cfg.poses_per_radius, cfg.min_elevation_deg, cfg.hemisphere_only, offset)
        for d in dirs:
            for step in range(200):
                pose = look_at_pose(target + radius * 1.01**step * d, target)
                if circle_visible(pose, K, r, cfg.boundary_samples):
                    break
            else:
                raise InfeasibleDistribution(f"no valid pose along direction {d} for radius {radius}")
            poses.append(pose)
    return poses


def select_poses(poses: Sequence[Pose], count: int | None) -> list[int]:
    """Evenly strided subset of pose indices (all indices when count is None)."""
    if count is None or count >= len(poses):
        return list(range(len(poses)))
    return [int(i) for i in np.linspace(0, len(poses), count, endpoint=False).astype(int)]


def is_degenerate(points: np.ndarray, pose: Pose) -> bool:
    try:
        c = objective_batch(np.asarray(points)[None], pose)[0]
    except MloptError:
        return True
    return not (np.isfinite(c) and 1.0 / c > RANK_TOL)


def sample_initial_points(n: int, r: float, rng: np.random.Generator, pose: Pose | None = None, max_attempts: int = 1000) -> PlanarPointSet:
    """Draw n points uniformly over the disk, redrawing degenerate sets."""
    if n < 4:
        raise ValueError("n must be >= 4")
    pose = pose or fronto_parallel_pose(1.0)
    for _ in range(max_attempts):
        rad = r * np.sqrt(rng.random(n))
        theta = 2 * np.pi * rng.random(n)
        pts = np.column_stack([rad * np.cos(theta), rad * np.sin(theta)])
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d[np.diag_indices(n)] = np.inf
        if d.min() < MIN_SEPARATION or is_degenerate(pts, pose):
            continue
        return PlanarPointSet(pts, r)
    raise SamplerExhausted(f"no non-degenerate {n}-point set after {max_attempts} draws")


def add_noise(exact_px: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    exact_px = np.asarray(exact_px, dtype=float)
    return exact_px + noise.sigma_px * rng.standard_normal(exact_px.shape)


@functools.lru_cache(maxsize=64)
def noise_draws(runs: int, n: int, base_seed: int, pose_index: int, init_index: int) -> np.ndarray:
    """Standard-normal draws (runs, n, 2); run j uses its own derived generator."""
    out = np.empty((runs, n, 2))
    for j in range(runs):
        out[j] = trial_rng(base_seed, TAG_NOISE, pose_index, init_index, j).standard_normal((n, 2))
    out.setflags(write=False)
    return out


def monte_carlo_eval(
    points,
    pose: Pose,
    K: Intrinsics,
    noise: NoiseModel,
    runs: int,
    methods: Sequence[str] = DEFAULT_METHODS,
    seed: tuple[int, int, int] = (0, 0, 0),
    refiner: RefinerConfig | None = None,
    radius: float | None = None,
) -> dict[str, TrialStatistics]:
    """Noisy-measurement statistics of the normalized DLT and pose estimators.

    Keys are ``"he"`` plus ``"re:<method>"`` / ``"te:<method>"`` per method. HE
    is in squared normalized image units, RE in degrees and TE in percent.
    ``seed`` is ``(base_seed, pose_index, init_index)``.
    """
    if isinstance(points, PlanarPointSet):
        radius = points.radius if radius is None else radius
        plane = points.points
    else:
        plane = np.asarray(points, dtype=float)
        radius = 0.15 if radius is None else radius
    n = plane.shape[0]
    validation = validation_grid(radius)
    exact_val = project(pose, lift(validation))
    exact_px = normalized_to_pixel(K, project(pose, lift(plane)))
    noisy_px = exact_px + noise.sigma_px * noise_draws(runs, n, *seed)
    obs = pixel_to_normalized(K, noisy_px)

    H, _, ok = solve_dlt_batch(plane, obs, normalized=True)
    he = homography_error_batch(H, exact_val, validation)
    failed = ~ok | ~np.isfinite(he)
    out = {"he": TrialStatistics.from_values("he", he, failed)}
    for name in methods:
        R, T, ok_m = METHODS[name](plane, obs, H, refiner)
        re = rotation_error(R, pose.R)
        te = translation_error(T, pose.T)
        bad = failed | ~ok_m | ~np.isfinite(re) | ~np.isfinite(te)
        out[f"re:{name}"] = TrialStatistics.from_values(f"re:{name}", np.atleast_1d(re), bad)
        out[f"te:{name}"] = TrialStatistics.from_values(f"te:{name}", np.atleast_1d(te), bad)
    return out


@dataclass
class ExperimentResult:
    trace: OptimizationTrace
    evaluated: list[int]
    stats: dict[int, dict[str, TrialStatistics]]

    @property
    def initial_stats(self) -> dict[str, TrialStatistics]:
        return self.stats[0]

    @property
    def final_stats(self) -> dict[str, TrialStatistics]:
        return self.stats[self.trace.best_index]


def run_optimization_experiment(
    pose: Pose,
    initial,
    config: OptimizerConfig,
    noise: NoiseModel,
    runs: int,
    K: Intrinsics | None = None,
    methods: Sequence[str] = DEFAULT_METHODS,
    eval_every: int = 1,
    seed: tuple[int, int, int] = (0, 0, 0),
    refiner: RefinerConfig | None = None,
) -> ExperimentResult:
    """Optimize one configuration and evaluate Monte-Carlo statistics along the way.

    ``initial`` is a :class:`PlanarPointSet` or a point count, in which case the
    initial set is drawn from the seed. Every ``eval_every``-th iterate is
    evaluated, plus the last and the best one. All evaluations share the same
    per-run noise draws.
    """
    K = K or Intrinsics()
    if not isinstance(initial, PlanarPointSet):
        base, pose_index, init_index = seed
        rng = trial_rng(base, TAG_INIT, pose_index, int(initial), init_index)
        initial = sample_initial_points(int(initial), config.radius, rng, pose)
    trace = optimize(initial, pose, config)
    last = len(trace) - 1
    evaluated = sorted(set(range(0, last + 1, max(1, eval_every))) | {last, trace.best_index})
    stats = {
        i: monte_carlo_eval(trace.points[i], pose, K, noise, runs, methods, seed, refiner, config.radius)
        for i in evaluated
    }
    return ExperimentResult(trace, evaluated, stats)


@dataclass
class SweepCell:
    pose_index: int
    n: int
    init_index: int
    initial_points: np.ndarray
    cond_initial: float
    stats_initial: dict[str, TrialStatistics]
    final_points: np.ndarray | None = None
    cond_final: float = math.nan
    stats_final: dict[str, TrialStatistics] | None = None
    status: str = "ok"
    iterations: int = 0
    optimizer_status: str = ""

    @property
    def optimized(self) -> bool:
        return self.stats_final is not None


@dataclass
class SweepResult:
    cells: list[SweepCell] = field(default_factory=list)
    metrics: tuple[str, ...] = ()

    def aggregate(self) -> list[dict]:
        """One row per (n, conditioning, metric); ill = random initial, well = optimized.

        ``mean`` averages the per-cell means, ``std`` the per-cell standard
        deviations; ``cond`` rows have a per-cell std of zero.
        """
        rows = []
        for n in sorted({c.n for c in self.cells}):
            group = [c for c in self.cells if c.n == n and c.status == "ok"]
            for label in ("ill", "well"):
                if label == "ill":
                    members = [(c.cond_initial, c.stats_initial) for c in group]
                else:
                    members = [(c.cond_final, c.stats_final) for c in group if c.optimized]
                if not members:
                    continue
                conds = np.array([m[0] for m in members])
                rows.append(dict(n=n, conditioning=label, metric="cond", mean=float(conds.mean()), std=0.0, cells=len(members)))
                for metric in self.metrics:
                    means = np.array([m[1][metric].mean for m in members])
                    stds = np.array([m[1][metric].std for m in members])
                    keep = np.isfinite(means)
                    rows.append(
                        dict(
                            n=n,
                            conditioning=label,
                            metric=metric,
                            mean=float(means[keep].mean()) if keep.any() else math.nan,
                            std=float(stds[keep].mean()) if keep.any() else math.nan,
                            cells=int(keep.sum()),
                        )
                    )
        return rows


def _run_cell(args) -> SweepCell:
    (pose, pose_index, n, init_index, do_opt, config, noise, runs, K, methods, base_seed, refiner) = args
    seed = (base_seed, pose_index, init_index)
    rng = trial_rng(base_seed, TAG_INIT, pose_index, n, init_index)
    try:
        initial = sample_initial_points(n, config.radius, rng, pose)
        cond0 = float(objective_batch(initial.points[None], pose)[0])
        stats0 = monte_carlo_eval(initial, pose, K, noise, runs, methods, seed, refiner, config.radius)
    except MloptError as exc:
        return SweepCell(pose_index, n, init_index, np.full((n, 2), np.nan), math.nan, {}, status=f"failed: {exc}")
    cell = SweepCell(pose_index, n, init_index, initial.points, cond0, stats0)
    if do_opt:
        try:
            trace = optimize(initial, pose, config)
            cell.final_points = trace.final_points
            cell.cond_final = trace.final_cond
            cell.iterations = len(trace) - 1
            cell.optimizer_status = trace.status
            cell.stats_final = monte_carlo_eval(trace.final_points, pose, K, noise, runs, methods, seed, refiner, config.radius)
        except MloptError as exc:
            cell.status = f"failed: {exc}"
    return cell


def sweep_n_points(
    poses: Sequence[Pose],
    n_values: Sequence[int],
    inits_per_pose: int,
    config: OptimizerConfig,
    noise: NoiseModel,
    runs: int,
    K: Intrinsics | None = None,
    methods: Sequence[str] = DEFAULT_METHODS,
    base_seed: int = 0,
    pose_indices: Sequence[int] | None = None,
    optimize_n: Collection[int] | None = None,
    refiner: RefinerConfig | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Random ("ill") versus optimized ("well") configurations for several n.

    ``pose_indices`` label the poses for seeding (defaults to 0..len-1) so a
    subset of a larger distribution reproduces the same cells. Counts not in
    ``optimize_n`` are only evaluated at their random initialization.
    """
    K = K or Intrinsics()
    labels = list(range(len(poses))) if pose_indices is None else list(pose_indices)
    tasks = [
        (pose, label, n, i, optimize_n is None or n in optimize_n, config, noise, runs, K, tuple(methods), base_seed, refiner)
        for pose, label in zip(poses, labels)
        for n in n_values
        for i in range(inits_per_pose)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        cells = [_run_cell(t) for t in tasks]
    metrics = ("he",) + tuple(f"{kind}:{m}" for m in methods for kind in ("re", "te"))
    return SweepResult(cells=cells, metrics=metrics)


def aggregate_histogram(final_sets: Sequence, bins: int, radius: float = 0.15) -> Histogram2D:
    """Counts of final point locations on a bins x bins grid over [-r, r]^2."""
    sets = [s.points if isinstance(s, PlanarPointSet) else np.asarray(s, dtype=float) for s in final_sets]
    if not sets:
        raise ValueError("no configurations given")
    ns = {s.shape[0] for s in sets}
    if len(ns) != 1:
        raise MixedN(f"configurations disagree on n: {sorted(ns)}")
    pts = np.concatenate(sets)
    edges = np.linspace(-radius, radius, bins + 1)
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[edges, edges])
    return Histogram2D(edges=edges, counts=counts.astype(np.int64), n=ns.pop())


def hull_side_ratio(points: np.ndarray) -> float:
    """Longest over shortest edge of the convex hull (vertices in hull order)."""
    points = np.asarray(points, dtype=float)
    hull = ConvexHull(points)
    v = points[hull.vertices]
    sides = np.linalg.norm(v - np.roll(v, -1, axis=0), axis=1)
    return float(sides.max() / sides.min())


def is_square_like(points: np.ndarray, max_ratio: float = 1.2) -> bool:
    """Four hull vertices with near-equal sides; a triangle plus an interior point does not count."""
    points = np.asarray(points, dtype=float)
    if points.shape[0] < 4 or len(ConvexHull(points).vertices) != 4:
        return False
    return hull_side_ratio(points) < max_ratio


def _square_corners(theta: np.ndarray, radius: float) -> np.ndarray:
    ang = theta[:, None] + np.arange(4) * (np.pi / 2)
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def align_square(points: np.ndarray, radius: float, resolution: int = 1800) -> float:
    """Rotation of the inscribed square best matching ``points`` (least squares)."""
    theta = np.linspace(0, np.pi / 2, resolution, endpoint=False)
    corners = _square_corners(theta, radius)
    d2 = np.sum((points[None, :, None, :] - corners[:, None, :, :]) ** 2, axis=-1).min(axis=-1)
    return float(theta[np.argmin(d2.sum(axis=1))])


def square_corner_mass(final_sets: Sequence, radius: float, tol_frac: float = 0.15) -> float:
    """Fraction of points within ``tol_frac * radius`` of the best-aligned square corners."""
    near = total = 0
    for s in final_sets:
        pts = s.points if isinstance(s, PlanarPointSet) else np.asarray(s, dtype=float)
        corners = _square_corners(np.array([align_square(pts, radius)]), radius)[0]
        d = np.linalg.norm(pts[:, None] - corners[None], axis=-1).min(axis=1)
        near += int(np.sum(d <= tol_frac * radius))
        total += pts.shape[0]
    return near / total
