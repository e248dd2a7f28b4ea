"""Condition-number minimization over planar control-point layouts.

The objective is ``c(A) = s1 / s8`` of the raw DLT matrix built from the exact
projections of the control points under a fixed camera pose. Points move by
projected gradient descent inside a disk of radius ``r``; each coordinate has
its own step length adapted with the SuperSAB rule.

The objective is a ratio of singular values and is not differentiable where
singular values coalesce (the square optimum itself sits on such a point), so
iterates can overshoot. The optimizer therefore returns the best iterate seen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .dlt import build_dlt_matrix, _ratio, RANK_TOL
from .errors import (
    DegenerateConfiguration,
    GradientProbeFailed,
    InitialConfigurationDegenerate,
    PointBehindCamera,
)
from .geometry import MIN_DEPTH, Pose

BOUNDARY_TOL = 1e-12
MIN_SEPARATION = 1e-9
# Scale-free stationarity |g| r / c at which the descent direction is round-off.
STATIONARY_TOL = 1e-12


@dataclass(frozen=True)
class PlanarPointSet:
    """n >= 4 control points on the marker plane, bounded by a disk of radius r."""

    points: np.ndarray
    radius: float = 0.15

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must have shape (n, 2)")
        if pts.shape[0] < 4:
            raise ValueError("n must be >= 4")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if np.any(np.linalg.norm(pts, axis=1) > self.radius + BOUNDARY_TOL):
            raise ValueError("points must lie inside the bounding disk")
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        if d.min() < MIN_SEPARATION:
            raise ValueError("control points must be distinct")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class OptimizerConfig:
    """Step-size and stopping settings.

    ``alpha0`` and ``fd_step`` default to ``1e-3 * radius`` and ``1e-6 * radius``.
    ``gradient`` selects central finite differences (``"fd"``) or the exact
    singular-value derivative (``"exact"``). ``handle_coalescence``
    switches the non-smooth handling in :func:`descent_direction`.
    """

    radius: float = 0.15
    alpha0: float | None = None
    eta_up: float = 1.05
    eta_down: float = 0.5
    max_iter: int = 500
    rel_tol: float = 1e-8
    fd_step: float | None = None
    gradient: str = "fd"
    window: int = 10
    handle_coalescence: bool = True

    def __post_init__(self) -> None:
        if self.alpha0 is None:
            object.__setattr__(self, "alpha0", 1e-3 * self.radius)
        if self.fd_step is None:
            object.__setattr__(self, "fd_step", 1e-6 * self.radius)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not self.eta_up > 1:
            raise ValueError("eta_up must be > 1")
        if not 0 < self.eta_down < 1:
            raise ValueError("eta_down must be in (0, 1)")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.gradient not in ("fd", "exact"):
            raise ValueError(f"unknown gradient method {self.gradient!r}")

    @property
    def step_bounds(self) -> tuple[float, float]:
        return 1e-9 * self.radius, 0.1 * self.radius


@dataclass
class OptimizationTrace:
    """Per-iteration record of an optimization run.

    Entry 0 is the initial configuration. ``best_index`` points at the lowest
    condition number, which is what :attr:`final_points` returns.
    """

    points: list[np.ndarray] = field(default_factory=list)
    cond: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    steps: list[np.ndarray] = field(default_factory=list)
    status: str = "running"
    best_index: int = 0

    def record(self, points, cond, grad_norm, steps) -> None:
        self.points.append(np.array(points))
        self.cond.append(float(cond))
        self.grad_norm.append(float(grad_norm))
        self.steps.append(np.array(steps))

    @property
    def final_points(self) -> np.ndarray:
        return self.points[self.best_index]

    @property
    def final_cond(self) -> float:
        return self.cond[self.best_index]

    @property
    def initial_cond(self) -> float:
        return self.cond[0]

    @property
    def best_so_far(self) -> np.ndarray:
        """Running minimum of the condition number (non-increasing)."""
        return np.minimum.accumulate(np.asarray(self.cond))

    def __len__(self) -> int:
        return len(self.cond)


def _project_points(points: np.ndarray, pose: Pose) -> np.ndarray:
    R, T = pose.R, pose.T
    X_c = points @ R[:, :2].T + T
    Z = X_c[..., 2:3]
    if np.any(Z <= MIN_DEPTH):
        raise PointBehindCamera("control point at or behind the camera plane")
    return X_c[..., :2] / Z


def objective_batch(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Condition numbers for a stack of configurations (B, n, 2)."""
    points = np.asarray(points, dtype=float)
    A = build_dlt_matrix(points, _project_points(points, pose))
    s = np.linalg.svd(A, compute_uv=False)
    return _ratio(s[..., 0], s[..., 7])


def objective(points, pose: Pose) -> float:
    """Condition number of the DLT matrix induced by ``points`` under ``pose``."""
    pts = points.points if isinstance(points, PlanarPointSet) else np.asarray(points, dtype=float)
    A = build_dlt_matrix(pts, _project_points(pts, pose))
    s = np.linalg.svd(A, compute_uv=False)
    if s[7] < RANK_TOL * s[0]:
        raise DegenerateConfiguration("control points induce a rank-deficient DLT matrix")
    return float(s[0] / s[7])


def _fd_gradient(pts: np.ndarray, pose: Pose, h: float) -> np.ndarray:
    n = pts.shape[0]
    eye = np.eye(2 * n).reshape(2 * n, n, 2) * h
    probes = np.concatenate([pts + eye, pts - eye])
    try:
        c = objective_batch(probes, pose)
    except PointBehindCamera as exc:
        raise GradientProbeFailed(str(exc)) from exc
    if not np.all(np.isfinite(c)):
        raise GradientProbeFailed("objective not finite at a probe point")
    return ((c[: 2 * n] - c[2 * n :]) / (2 * h)).reshape(n, 2)


def singular_value_jacobian(points, pose: Pose, which=(0, 7)) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Singular values of the DLT matrix and the derivatives of the selected ones.

    ``ds_k / dX = u_k^T (dA / dX) v_k``, valid where ``s_k`` is simple. Returns
    ``(s, {k: (n, 2) array})``.
    """
    pts = points.points if isinstance(points, PlanarPointSet) else np.asarray(points, dtype=float)
    n = pts.shape[0]
    R, T = pose.R, pose.T
    X_c = pts @ R[:, :2].T + T
    Z = X_c[:, 2]
    x = X_c[:, 0] / Z
    y = X_c[:, 1] / Z
    A = build_dlt_matrix(pts, np.column_stack([x, y]))
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    Xb = np.column_stack([pts, np.ones(n)])
    out = {k: np.empty((n, 2)) for k in which}
    for j in range(2):
        col = R[:, j]
        dx = (col[0] - x * col[2]) / Z
        dy = (col[1] - y * col[2]) / Z
        e = np.zeros((n, 3))
        e[:, j] = 1.0
        d_even = np.concatenate([np.zeros((n, 3)), -e, dy[:, None] * Xb + y[:, None] * e], axis=1)
        d_odd = np.concatenate([e, np.zeros((n, 3)), -dx[:, None] * Xb - x[:, None] * e], axis=1)
        for k in which:
            out[k][:, j] = U[0::2, k] * (d_even @ Vt[k]) + U[1::2, k] * (d_odd @ Vt[k])
    return s, out


def exact_gradient(points, pose: Pose) -> np.ndarray:
    """Analytic gradient via dc = (u1^T dA v1) / s8 - s1 (u8^T dA v8) / s8^2.

    Valid where s1 and s8 are simple singular values.
    """
    s, ds = singular_value_jacobian(points, pose)
    return ds[0] / s[7] - (s[0] / s[7] ** 2) * ds[7]


def gradient(points, pose: Pose, fd_step: float, method: str = "fd") -> np.ndarray:
    """Gradient of the objective as a flat 2n-vector ``[dX0, dY0, dX1, ...]``."""
    pts = points.points if isinstance(points, PlanarPointSet) else np.asarray(points, dtype=float)
    if method == "exact":
        return exact_gradient(pts, pose).ravel()
    return _fd_gradient(pts, pose, fd_step).ravel()


def min_norm_combination(vectors: np.ndarray) -> np.ndarray:
    """Shortest vector in the convex hull of the rows of ``vectors``."""
    G = np.asarray(vectors, dtype=float)
    if G.shape[0] == 1:
        return G[0].copy()
    # Penalized NNLS enforces sum(weights) = 1 alongside min |G^T w|.
    big = 1e3 * max(np.abs(G).max(), 1e-300)
    lhs = np.vstack([G.T, np.full(G.shape[0], big)])
    rhs = np.concatenate([np.zeros(G.shape[1]), [big]])
    w, _ = nnls(lhs, rhs)
    return (w / w.sum()) @ G


def _gap_can_close(s, ds, a: int, b: int, reach: float) -> bool:
    # Linear bound on how far s_a - s_b can move when every coordinate moves by <= reach.
    return s[a] - s[b] <= np.abs(ds[a] - ds[b]).sum() * reach


def descent_direction(points, pose: Pose, config: OptimizerConfig, reach: float | None = None) -> np.ndarray:
    """Steepest-descent direction of c as a flat 2n-vector.

    c = s1 / s8 is smooth only while s1 and s8 are simple. If the next step
    (each coordinate moving at most ``reach`` meters, default ``alpha0``) could
    close the gap s1 - s2 or s7 - s8, c behaves like the maximum of the smooth
    branches ``s_i / s_j`` (i in {1, 2}, j in {7, 8}) and a single branch
    gradient zigzags across the ridge. The direction is then the min-norm
    convex combination of the active branch gradients, which vanishes at a
    stationary point such as the inscribed square. Elsewhere it is the
    configured gradient.
    """
    pts = points.points if isinstance(points, PlanarPointSet) else np.asarray(points, dtype=float)
    if config.handle_coalescence:
        reach = config.alpha0 if reach is None else reach
        s, ds = singular_value_jacobian(pts, pose, which=(0, 1, 6, 7))
        top = [0, 1] if _gap_can_close(s, ds, 0, 1, reach) else [0]
        bottom = [7, 6] if _gap_can_close(s, ds, 6, 7, reach) else [7]
        if len(top) + len(bottom) > 2:
            branches = [(ds[i] / s[j] - (s[i] / s[j] ** 2) * ds[j]).ravel() for i in top for j in bottom]
            return min_norm_combination(np.array(branches))
    return _checked_gradient(pts, pose, config)


def supersab_update(steps: np.ndarray, prev_grad: np.ndarray, grad: np.ndarray, config: OptimizerConfig) -> np.ndarray:
    """Grow steps whose gradient sign persisted, shrink those that flipped."""
    agree = np.sign(grad) * np.sign(prev_grad)
    out = np.where(agree > 0, steps * config.eta_up, np.where(agree < 0, steps * config.eta_down, steps))
    lo, hi = config.step_bounds
    return np.clip(out, lo, hi)


def constrain_to_disk(points: np.ndarray, radius: float) -> np.ndarray:
    """Radially project points lying outside the disk back onto its boundary."""
    points = np.asarray(points, dtype=float)
    norm = np.linalg.norm(points, axis=-1, keepdims=True)
    outside = norm > radius
    scale = np.where(outside, radius / np.where(outside, norm, 1.0), 1.0)
    return np.where(outside, points * scale, points)


def projected_gradient(points: np.ndarray, grad: np.ndarray, radius: float) -> np.ndarray:
    """Drop the outward radial component for points resting on the boundary."""
    pts = np.asarray(points, dtype=float)
    g = np.array(grad, dtype=float).reshape(pts.shape)
    norm = np.linalg.norm(pts, axis=1)
    on_rim = norm >= radius * (1 - 1e-9)
    if np.any(on_rim):
        u = pts[on_rim] / norm[on_rim, None]
        radial = np.sum(g[on_rim] * u, axis=1)
        pushing_out = radial < 0
        g[on_rim] -= np.where(pushing_out, radial, 0.0)[:, None] * u
    return g.ravel()


def _checked_gradient(pts, pose, config):
    h = config.fd_step
    for _ in range(8):
        try:
            return gradient(pts, pose, h, config.gradient)
        except GradientProbeFailed:
            h *= 0.1
    return gradient(pts, pose, h, config.gradient)


def optimize(initial, pose: Pose, config: OptimizerConfig | None = None, callback=None) -> OptimizationTrace:
    """Projected gradient descent on the condition number with SuperSAB steps.

    Each coordinate moves by ``steps * g / max|g|`` where ``g`` is the
    projected :func:`descent_direction`, so a step length is a displacement in
    meters. Terminates as ``converged`` when the relative change of c stays
    below ``rel_tol`` for ``window`` consecutive iterations or the projected
    direction vanishes to round-off, as ``stalled`` when every step hits the
    lower clamp, and otherwise after ``max_iter`` iterations.

    ``callback(iteration, points, cond)`` is invoked for every recorded
    iterate, including the initial one.
    """
    config = config or OptimizerConfig()
    if isinstance(initial, PlanarPointSet):
        pts = np.array(initial.points)
    else:
        pts = np.array(PlanarPointSet(initial, config.radius).points)
    try:
        c = objective(pts, pose)
    except (DegenerateConfiguration, PointBehindCamera) as exc:
        raise InitialConfigurationDegenerate(str(exc)) from exc

    r = config.radius
    lo, _ = config.step_bounds
    steps = np.full(pts.size, config.alpha0)
    prev = np.zeros(pts.size)
    g = projected_gradient(pts, descent_direction(pts, pose, config, steps.max() * config.eta_up), r)

    trace = OptimizationTrace()
    trace.record(pts, c, np.linalg.norm(g), steps)
    if callback is not None:
        callback(0, pts, c)
    changes: list[float] = []
    trace.status = "max_iter"
    for it in range(1, config.max_iter + 1):
        scale = np.abs(g).max()
        if scale * r <= STATIONARY_TOL * c:
            trace.status = "converged"
            break
        steps = supersab_update(steps, prev, g, config)
        pts = constrain_to_disk(pts - (steps * g / scale).reshape(pts.shape), r)
        c_new = float(objective_batch(pts[None], pose)[0])
        if not np.isfinite(c_new):
            trace.status = "stalled"
            break
        prev = g
        g = projected_gradient(pts, descent_direction(pts, pose, config, steps.max() * config.eta_up), r)
        changes.append(abs(c_new - c) / c)
        c = c_new
        trace.record(pts, c, np.linalg.norm(g), steps)
        if callback is not None:
            callback(it, pts, c)
        if len(changes) >= config.window and max(changes[-config.window :]) < config.rel_tol:
            trace.status = "converged"
            break
        if np.all(steps <= lo * (1 + 1e-12)):
            trace.status = "stalled"
            break
    trace.best_index = int(np.argmin(trace.cond))
    return trace
