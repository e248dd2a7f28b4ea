"""Pinhole camera and rigid-body helpers.

Conventions: world-to-camera transform ``X_c = R @ X_w + T``; normalized image
coordinates are ``[X_c / Z_c, Y_c / Z_c]``; the marker lives on the world
plane ``Z_w = 0`` so a planar point ``(X, Y)`` lifts to ``(X, Y, 0)``.

Functions accept a single point or a stack of points along leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateHomography, PointAtInfinity, PointBehindCamera

MIN_DEPTH = 1e-9
_SQRT3 = np.sqrt(3.0)


@dataclass(frozen=True)
class Pose:
    """Rigid transform from the world (marker) frame to the camera frame."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self) -> None:
        R = np.array(self.R, dtype=float).reshape(3, 3)
        T = np.array(self.T, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(T))):
            raise ValueError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("R is not a proper rotation")
        R.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.T


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 800.0
    fy: float = 800.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, px: np.ndarray) -> np.ndarray:
        """Boolean mask of pixel coordinates lying inside the image rectangle."""
        px = np.asarray(px, dtype=float)
        return (
            (px[..., 0] >= 0.0)
            & (px[..., 0] <= self.width)
            & (px[..., 1] >= 0.0)
            & (px[..., 1] <= self.height)
        )


class AxisAngle(NamedTuple):
    axis: np.ndarray
    angle: float


def lift(points: np.ndarray) -> np.ndarray:
    """Planar marker coordinates (..., 2) -> world points (..., 3) with Z = 0."""
    points = np.asarray(points, dtype=float)
    return np.concatenate([points, np.zeros(points.shape[:-1] + (1,))], axis=-1)


def transform(pose: Pose, X_w: np.ndarray) -> np.ndarray:
    return np.asarray(X_w, dtype=float) @ pose.R.T + pose.T


def project(pose: Pose, X_w: np.ndarray) -> np.ndarray:
    """Project world points to normalized image coordinates."""
    X_c = transform(pose, X_w)
    Z = X_c[..., 2:3]
    if np.any(Z <= MIN_DEPTH):
        raise PointBehindCamera("point at or behind the camera plane")
    return X_c[..., :2] / Z


def pixel_to_normalized(K: Intrinsics, x_px: np.ndarray) -> np.ndarray:
    x_px = np.asarray(x_px, dtype=float)
    return np.stack([(x_px[..., 0] - K.cx) / K.fx, (x_px[..., 1] - K.cy) / K.fy], axis=-1)


def normalized_to_pixel(K: Intrinsics, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 0] * K.fx + K.cx, x[..., 1] * K.fy + K.cy], axis=-1)


def canonicalize_homography(H: np.ndarray) -> np.ndarray:
    """Scale to Frobenius norm sqrt(3) and fix the sign so that H[2, 2] >= 0.

    If H[2, 2] is numerically zero the sign of the largest-magnitude entry is
    made positive instead. Works on stacks of shape (..., 3, 3).
    """
    H = np.asarray(H, dtype=float)
    norm = np.linalg.norm(H, axis=(-2, -1), keepdims=True)
    H = H * (_SQRT3 / norm)
    flat = H.reshape(H.shape[:-2] + (9,))
    h22 = flat[..., 8]
    idx = np.argmax(np.abs(flat), axis=-1)
    biggest = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    ref = np.where(np.abs(h22) > 1e-12, h22, biggest)
    sign = np.where(ref < 0, -1.0, 1.0)
    return H * sign[..., None, None]


def pose_to_homography(pose: Pose) -> np.ndarray:
    """Plane-to-image homography ``[r1, r2, T]`` in canonical scale."""
    H = np.column_stack([pose.R[:, 0], pose.R[:, 1], pose.T])
    s = np.linalg.svd(H / np.linalg.norm(H), compute_uv=False)
    if s[-1] <= 1e-12:
        raise DegenerateHomography("camera center lies on the marker plane")
    return canonicalize_homography(H)


def apply_homography(H: np.ndarray, X_p: np.ndarray) -> np.ndarray:
    """Map planar points (..., 2) through H with perspective division."""
    H = np.asarray(H, dtype=float)
    X_p = np.asarray(X_p, dtype=float)
    hom = X_p @ H[:, :2].T + H[:, 2]
    w = hom[..., 2:3]
    scale = np.linalg.norm(H) / _SQRT3
    if np.any(np.abs(w) <= 1e-12 * scale):
        raise PointAtInfinity("point maps to the line at infinity")
    return hom[..., :2] / w


def rotation_to_axis_angle(R: np.ndarray) -> AxisAngle:
    """Axis-angle of a rotation matrix, angle in [0, pi].

    The axis is [0, 0, 1] for the identity; at angle pi the axis sign is chosen
    so its first nonzero component is positive.
    """
    rotvec = Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()
    angle = float(np.linalg.norm(rotvec))
    if angle < 1e-15:
        return AxisAngle(np.array([0.0, 0.0, 1.0]), 0.0)
    axis = rotvec / angle
    if np.pi - angle < 1e-9:
        nz = axis[np.abs(axis) > 1e-12]
        if nz.size and nz[0] < 0:
            axis = -axis
    return AxisAngle(axis, angle)


def axis_angle_to_rotation(aa: AxisAngle) -> np.ndarray:
    axis = np.asarray(aa.axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * aa.angle).as_matrix()


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rotation matrix of ``angle`` radians about ``axis``."""
    return axis_angle_to_rotation(AxisAngle(np.asarray(axis, dtype=float), angle))


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for vectors of shape (..., 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def exp_so3(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula for stacks of rotation vectors (..., 3)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = skew(w)
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * W + b * (W @ W)
