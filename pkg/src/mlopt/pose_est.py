"""Pose recovery from homographies, reprojection-error refinement and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateHomography, DivergedBehindCamera, ZeroTranslation
from .geometry import MIN_DEPTH, Pose, apply_homography, exp_so3, project, skew


@dataclass(frozen=True)
class RefinerConfig:
    max_iter: int = 100
    gradient_tol: float = 1e-10
    param_tol: float = 1e-12
    damping_init: float = 1e-3

    def __post_init__(self) -> None:
        if not (self.max_iter > 0 and self.gradient_tol > 0 and self.param_tol > 0 and self.damping_init > 0):
            raise ValueError("refiner settings must be positive")


_DAMPING_MAX = 1e12


def _nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def homography_to_pose_batch(H: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decompose stacked homographies (B, 3, 3) into rotations and translations.

    Returns ``(R, T, ok)``; ``ok`` is False where H is numerically rank
    deficient.
    """
    H = np.asarray(H, dtype=float)
    c1, c2, c3 = H[..., :, 0], H[..., :, 1], H[..., :, 2]
    n1 = np.linalg.norm(c1, axis=-1)
    n2 = np.linalg.norm(c2, axis=-1)
    s = np.linalg.svd(H / np.linalg.norm(H, axis=(-2, -1), keepdims=True), compute_uv=False)
    ok = s[..., -1] > 1e-12
    lam = 2.0 / np.where(ok, n1 + n2, 1.0)
    lam = np.where(lam * c3[..., 2] < 0, -lam, lam)
    r1 = lam[..., None] * c1
    r2 = lam[..., None] * c2
    M = np.stack([r1, r2, np.cross(r1, r2)], axis=-1)
    R = _nearest_rotation(M)
    T = lam[..., None] * c3
    return R, T, ok


def homography_to_pose(H: np.ndarray) -> Pose:
    """Recover ``(R, T)`` from ``H ~ [r1, r2, T]``, marker origin in front of the camera."""
    R, T, ok = homography_to_pose_batch(np.asarray(H, dtype=float)[None])
    if not ok[0]:
        raise DegenerateHomography("homography is rank deficient")
    return Pose(R[0], T[0])


def _residuals(world, obs, R, T):
    Xc = world @ np.swapaxes(R, -1, -2) + T[..., None, :]
    Z = Xc[..., 2]
    pred = Xc[..., :2] / Z[..., None]
    return obs - pred, Xc, Z


def refine_pose_batch(world: np.ndarray, obs: np.ndarray, R0: np.ndarray, T0: np.ndarray, config: RefinerConfig | None = None):
    """Damped Gauss-Newton (Levenberg-Marquardt) on the reprojection error.

    ``world`` is (n, 3), ``obs`` (B, n, 2) normalized image points and
    ``R0``/``T0`` the stacked initial poses. The rotation is updated as
    ``exp(w) @ R``. Steps are accepted only when they lower the cost, so the
    output cost never exceeds the initial one. Returns ``(R, T, ok)`` with
    ``ok`` False where the initial pose put a point behind the camera.
    """
    config = config or RefinerConfig()
    world = np.asarray(world, dtype=float)
    obs = np.asarray(obs, dtype=float)
    R = np.array(R0, dtype=float)
    T = np.array(T0, dtype=float)
    B, n = obs.shape[0], obs.shape[1]
    res, Xc, Z = _residuals(world, obs, R, T)
    ok = np.all(Z > MIN_DEPTH, axis=-1)
    cost = np.where(ok, np.sum(res**2, axis=(-2, -1)), np.inf)
    lam = np.full(B, config.damping_init)
    active = ok.copy()
    for _ in range(config.max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        r_a, Xc_a, Z_a = res[idx], Xc[idx], Z[idx]
        x_a = Xc_a[..., :2] / Z_a[..., None]
        # d(pred)/d(Xc), shape (b, n, 2, 3)
        dP = np.zeros((idx.size, n, 2, 3))
        dP[..., 0, 0] = 1.0 / Z_a
        dP[..., 1, 1] = 1.0 / Z_a
        dP[..., :, 2] = -x_a / Z_a[..., None]
        dX = np.concatenate([-skew(Xc_a - T[idx][:, None, :]), np.broadcast_to(np.eye(3), (idx.size, n, 3, 3))], axis=-1)
        J = (dP @ dX).reshape(idx.size, 2 * n, 6)
        rv = r_a.reshape(idx.size, 2 * n)
        JtJ = np.swapaxes(J, -1, -2) @ J
        Jtr = np.einsum("bij,bi->bj", J, rv)
        converged = np.abs(Jtr).max(axis=-1) < config.gradient_tol
        diag = np.einsum("bii->bi", JtJ)
        lhs = JtJ + (lam[idx][:, None] * np.maximum(diag, 1e-12))[..., None] * np.eye(6)
        delta = np.linalg.solve(lhs, Jtr[..., None])[..., 0]
        R_try = exp_so3(delta[:, :3]) @ R[idx]
        T_try = T[idx] + delta[:, 3:]
        res_try, Xc_try, Z_try = _residuals(world, obs[idx], R_try, T_try)
        valid = np.all(Z_try > MIN_DEPTH, axis=-1)
        cost_try = np.where(valid, np.sum(res_try**2, axis=(-2, -1)), np.inf)
        accept = (cost_try < cost[idx]) & ~converged
        a = idx[accept]
        R[a], T[a], cost[a] = R_try[accept], T_try[accept], cost_try[accept]
        res[a], Xc[a], Z[a] = res_try[accept], Xc_try[accept], Z_try[accept]
        lam[a] = np.maximum(lam[a] / 10.0, 1e-15)
        rej = idx[~accept]
        lam[rej] *= 10.0
        scale = np.linalg.norm(np.concatenate([np.zeros((idx.size, 3)), T[idx]], axis=-1), axis=-1)
        small = np.linalg.norm(delta, axis=-1) <= config.param_tol * (scale + config.param_tol)
        done = converged | (accept & small) | (lam[idx] > _DAMPING_MAX)
        active[idx[done]] = False
    return R, T, ok


def refine_pose_mre(world: np.ndarray, obs: np.ndarray, init: Pose, config: RefinerConfig | None = None) -> Pose:
    """Minimize the summed squared reprojection error starting from ``init``."""
    world = np.asarray(world, dtype=float)
    if world.shape[0] < 3:
        raise ValueError("need at least 3 correspondences")
    R, T, ok = refine_pose_batch(world, np.asarray(obs, dtype=float)[None], init.R[None], init.T[None], config)
    if not ok[0]:
        raise DivergedBehindCamera("initial pose places a point behind the camera")
    R_out = _nearest_rotation(R[0][None])[0]
    return Pose(R_out, T[0])


def reprojection_cost(world, obs, pose: Pose) -> float:
    return float(np.sum((np.asarray(obs) - project(pose, world)) ** 2))


def validation_grid(radius: float, side: int = 7, extent: float = 1.25) -> np.ndarray:
    """Evenly spaced ``side x side`` grid over ``[-extent*r, extent*r]^2``."""
    ticks = np.linspace(-extent * radius, extent * radius, side)
    gx, gy = np.meshgrid(ticks, ticks, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


def homography_error_batch(H: np.ndarray, truth_img: np.ndarray, validation: np.ndarray) -> np.ndarray:
    """Mean squared distance between exact projections and ``H``-mapped validation points.

    ``truth_img`` (M, 2) are the exact projections of ``validation`` (M, 2).
    Non-finite where a validation point maps to infinity.
    """
    H = np.asarray(H, dtype=float)
    hom = validation @ np.swapaxes(H[..., :, :2], -1, -2) + H[..., None, :, 2]
    w = hom[..., 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        mapped = hom[..., :2] / w
    bad = np.any(np.abs(w[..., 0]) <= 1e-12 * np.linalg.norm(H, axis=(-2, -1))[..., None] / np.sqrt(3), axis=-1)
    err = np.mean(np.sum((truth_img - mapped) ** 2, axis=-1), axis=-1)
    return np.where(bad, np.inf, err)


def homography_error(H_hat: np.ndarray, truth: Pose, validation: np.ndarray) -> float:
    """HE: mean squared reprojection error of ``H_hat`` on the validation points."""
    from .geometry import lift

    validation = np.asarray(validation, dtype=float)
    exact = project(truth, lift(validation))
    mapped = apply_homography(H_hat, validation)
    return float(np.mean(np.sum((exact - mapped) ** 2, axis=-1)))


def rotation_error(R_hat: np.ndarray, R: np.ndarray) -> np.ndarray | float:
    """Angle in degrees of ``R_hat^T R``; accepts stacks."""
    M = np.swapaxes(np.asarray(R_hat, dtype=float), -1, -2) @ np.asarray(R, dtype=float)
    ang = np.degrees(Rotation.from_matrix(M.reshape(-1, 3, 3)).magnitude())
    return float(ang[0]) if M.ndim == 2 else ang.reshape(M.shape[:-2])


def translation_error(T_hat: np.ndarray, T: np.ndarray) -> np.ndarray | float:
    """Relative translation error in percent; accepts stacks of ``T_hat``."""
    T = np.asarray(T, dtype=float)
    norm = np.linalg.norm(T)
    if norm <= 1e-12:
        raise ZeroTranslation("reference translation is zero")
    err = np.linalg.norm(np.asarray(T_hat, dtype=float) - T, axis=-1) / norm * 100.0
    return float(err) if np.ndim(err) == 0 else err


# Registered pose estimators. Each maps (plane points (n, 2), noisy normalized
# observations (B, n, 2), DLT homographies (B, 3, 3), refiner config) to
# (R, T, ok).
def _dlt_decomp(plane, obs, H, config):
    return homography_to_pose_batch(H)


def _mre_lm(plane, obs, H, config):
    R0, T0, ok0 = homography_to_pose_batch(H)
    world = np.column_stack([plane, np.zeros(len(plane))])
    R, T, ok = refine_pose_batch(world, obs, R0, T0, config)
    return R, T, ok & ok0


METHODS = {
    "dlt-decomp": _dlt_decomp,
    "mre-lm": _mre_lm,
}


def register_method(name: str, fn) -> None:
    """Add a pose estimator to the registry used by the simulation and CLI."""
    METHODS[name] = fn
