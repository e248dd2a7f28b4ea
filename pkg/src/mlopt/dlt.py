"""Direct linear transform for plane-to-image homographies.

Row layout per correspondence ``(X, Y) <-> (x, y)`` with ``Xb = [X, Y, 1]``::

    [ 0 0 0   -Xb    y*Xb ]
    [  Xb    0 0 0  -x*Xb ]

so that ``A @ h = 0`` for ``h = H.ravel()`` (row-major). All builders accept
stacks along leading axes, which the Monte-Carlo code relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, DegenerateSet, IllConditioned, TooFewPoints
from .geometry import canonicalize_homography

RANK_TOL = 1e-12


@dataclass(frozen=True)
class SvdSummary:
    """Singular system of a 2n x 9 DLT matrix.

    ``s`` always has 9 entries (padded with zeros when 2n < 9), ``V`` holds the
    right singular vectors as columns and ``U`` the first ``min(2n, 9)`` left
    singular vectors. Each ``v_k`` has its largest-magnitude entry positive and
    ``u_k`` is flipped with it, so ``A = U diag(s) V^T`` still holds.
    """

    s: np.ndarray
    U: np.ndarray
    V: np.ndarray

    @property
    def condition_number(self) -> float:
        return _ratio(self.s[0], self.s[7])

    @property
    def null_vector(self) -> np.ndarray:
        return self.V[:, 8]


@dataclass(frozen=True)
class ErrorBounds:
    lower: float
    upper: float
    relative_error: float


def build_dlt_matrix(plane: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Stack the two DLT rows of every correspondence into a (..., 2n, 9) matrix."""
    plane = np.asarray(plane, dtype=float)
    image = np.asarray(image, dtype=float)
    n = plane.shape[-2]
    if n < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {n}")
    shape = np.broadcast_shapes(plane.shape[:-2], image.shape[:-2])
    Xb = np.concatenate([plane, np.ones(plane.shape[:-1] + (1,))], axis=-1)
    Xb = np.broadcast_to(Xb, shape + (n, 3))
    x = np.broadcast_to(image[..., 0:1], shape + (n, 1))
    y = np.broadcast_to(image[..., 1:2], shape + (n, 1))
    A = np.zeros(shape + (2 * n, 9))
    A[..., 0::2, 3:6] = -Xb
    A[..., 0::2, 6:9] = y * Xb
    A[..., 1::2, 0:3] = Xb
    A[..., 1::2, 6:9] = -x * Xb
    return A


def _ratio(s1, s8):
    s1 = np.asarray(s1, dtype=float)
    s8 = np.asarray(s8, dtype=float)
    out = np.full(np.broadcast_shapes(s1.shape, s8.shape), np.inf)
    ok = s8 >= 1e-300
    np.divide(s1, s8, out=out, where=ok)
    return float(out) if out.ndim == 0 else out


def condition_number(A: np.ndarray):
    """s1 / s8 of the DLT matrix (or of each matrix in a stack)."""
    s = np.linalg.svd(np.asarray(A, dtype=float), compute_uv=False)
    return _ratio(s[..., 0], s[..., 7])


def svd_summary(A: np.ndarray) -> SvdSummary:
    A = np.asarray(A, dtype=float)
    U, s, Vt = np.linalg.svd(A, full_matrices=True)
    V = Vt.T.copy()
    k = min(A.shape[0], 9)
    U = U[:, :k].copy()
    s = np.concatenate([s, np.zeros(9 - s.size)])
    for j in range(9):
        if V[np.argmax(np.abs(V[:, j])), j] < 0:
            V[:, j] *= -1
            if j < k:
                U[:, j] *= -1
    return SvdSummary(s=s, U=U, V=V)


def hartley_normalize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity transform to zero centroid and mean distance sqrt(2).

    Returns the transformed points and the 3x3 matrix mapping the originals
    onto them. Stacks of point sets (..., m, 2) are normalized independently.
    """
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=-2, keepdims=True)
    centered = points - centroid
    mean_dist = np.linalg.norm(centered, axis=-1).mean(axis=-1)
    if np.any(mean_dist <= 1e-300) or points.shape[-2] < 2:
        raise DegenerateSet("cannot normalize coincident points")
    scale = np.sqrt(2.0) / mean_dist
    T = np.zeros(points.shape[:-2] + (3, 3))
    T[..., 0, 0] = scale
    T[..., 1, 1] = scale
    T[..., 0, 2] = -scale * centroid[..., 0, 0]
    T[..., 1, 2] = -scale * centroid[..., 0, 1]
    T[..., 2, 2] = 1.0
    return centered * scale[..., None, None], T


def solve_dlt_batch(plane: np.ndarray, image: np.ndarray, normalized: bool = True):
    """Vectorised DLT over a stack of image measurements.

    ``plane`` is (n, 2) or (B, n, 2), ``image`` is (B, n, 2). Returns canonical
    homographies (B, 3, 3), the condition numbers of the solved matrices and a
    mask that is False where the system is rank deficient (s8 / s1 < 1e-12).
    """
    plane = np.asarray(plane, dtype=float)
    image = np.asarray(image, dtype=float)
    if normalized:
        plane_n, Tp = hartley_normalize(plane)
        image_n, Ti = hartley_normalize(image)
    else:
        plane_n, image_n = plane, image
    A = build_dlt_matrix(plane_n, image_n)
    # Padding to 9 rows keeps s[..., 8] available for n = 4.
    if A.shape[-2] < 9:
        pad = np.zeros(A.shape[:-2] + (9 - A.shape[-2], 9))
        A = np.concatenate([A, pad], axis=-2)
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    H = Vt[..., 8, :].reshape(Vt.shape[:-2] + (3, 3))
    if normalized:
        H = np.linalg.solve(Ti, H @ Tp)
    ok = s[..., 7] >= RANK_TOL * s[..., 0]
    return canonicalize_homography(H), _ratio(s[..., 0], s[..., 7]), ok


def solve_dlt(plane: np.ndarray, image: np.ndarray, normalized: bool = True) -> tuple[np.ndarray, SvdSummary]:
    """Estimate the homography mapping ``plane`` onto ``image``.

    With ``normalized=True`` both point sets are Hartley-normalized before the
    SVD and the solution is mapped back; the returned summary then describes
    the normalized matrix.
    """
    plane = np.asarray(plane, dtype=float)
    image = np.asarray(image, dtype=float)
    if plane.shape[0] < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {plane.shape[0]}")
    if normalized:
        plane_n, Tp = hartley_normalize(plane)
        image_n, Ti = hartley_normalize(image)
    else:
        plane_n, image_n = plane, image
    summary = svd_summary(build_dlt_matrix(plane_n, image_n))
    if summary.s[7] < RANK_TOL * summary.s[0]:
        raise DegenerateConfiguration("DLT matrix has rank < 8; homography not determined")
    H = summary.null_vector.reshape(3, 3)
    if normalized:
        H = np.linalg.solve(Ti, H @ Tp)
    return canonicalize_homography(H), summary


def first_order_perturbation(clean: SvdSummary, E: np.ndarray) -> np.ndarray:
    """First-order prediction of the perturbed null vector of ``A + E``.

    ``v9 - sum_k (u_k^T E v9 / s_k) v_k`` over the eight nonzero singular
    directions of the clean matrix.
    """
    s = clean.s[:8]
    if np.any(s < 1e-12):
        raise IllConditioned("clean system has a vanishing nonzero singular value")
    v9 = clean.V[:, 8]
    weights = (clean.U[:, :8].T @ (np.asarray(E, dtype=float) @ v9)) / s
    return v9 - clean.V[:, :8] @ weights


def align_scale(h: np.ndarray, h_hat: np.ndarray) -> np.ndarray:
    """Rescale ``h_hat`` by the least-squares factor argmin_l ||h - l h_hat||."""
    h_hat = np.asarray(h_hat, dtype=float)
    return h_hat * (np.dot(h, h_hat) / np.dot(h_hat, h_hat))


def relative_error_bounds(A: np.ndarray, A_tilde: np.ndarray, h_true: np.ndarray, h_hat: np.ndarray) -> ErrorBounds:
    """Perturbation bounds on the relative homography error (spectral norms)."""
    A = np.asarray(A, dtype=float)
    A_tilde = np.asarray(A_tilde, dtype=float)
    h_true = np.asarray(h_true, dtype=float)
    h_al = align_scale(h_true, h_hat)
    diff = h_true - h_al
    norm_hat = np.linalg.norm(h_al)
    norm_At = np.linalg.norm(A_tilde, 2)
    lower = np.linalg.norm(A_tilde @ diff) / (norm_At * norm_hat)
    upper = condition_number(A) * np.linalg.norm(A - A_tilde, 2) / np.linalg.norm(A, 2)
    return ErrorBounds(lower=float(lower), upper=float(upper), relative_error=float(np.linalg.norm(diff) / norm_hat))
