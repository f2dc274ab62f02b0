"""Epipolar geometry: residuals, normalized 8-point estimation, RANSAC, E deviation.

Correspondences are rows ``(u, v, u', v')`` in normalized (intrinsics-free)
image coordinates; ``x' ^T E x = 0`` for a true match.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError

DENOM_FLOOR = 1e-15


class DegenerateConfiguration(ContractError):
    """The correspondences do not determine a unique essential matrix."""


def skew(t) -> np.ndarray:
    tx, ty, tz = np.asarray(t, dtype=np.float64)
    return np.array([[0.0, -tz, ty], [tz, 0.0, -tx], [-ty, tx, 0.0]])


def normalize_e(E) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    norm = np.linalg.norm(E)
    if norm == 0 or not np.isfinite(norm):
        raise ContractError("essential matrix must be finite and non-zero")
    return E / norm


def _homogeneous(corrs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    corrs = np.asarray(corrs, dtype=np.float64).reshape(-1, 4)
    ones = np.ones((corrs.shape[0], 1))
    return np.hstack([corrs[:, :2], ones]), np.hstack([corrs[:, 2:], ones])


def epipolar_residuals(corrs, E) -> np.ndarray:
    """Symmetric squared epipolar distance of every correspondence."""
    x, xp = _homogeneous(corrs)
    E = np.asarray(E, dtype=np.float64)
    Ex = x @ E.T
    Etxp = xp @ E
    e = (xp * Ex).sum(axis=1)
    d1 = np.maximum(Ex[:, 0] ** 2 + Ex[:, 1] ** 2, DENOM_FLOOR)
    d2 = np.maximum(Etxp[:, 0] ** 2 + Etxp[:, 1] ** 2, DENOM_FLOOR)
    return e * e * (1.0 / d1 + 1.0 / d2)


def epipolar_residual(c, E) -> float:
    return float(epipolar_residuals(np.asarray(c, dtype=np.float64).reshape(1, 4), E)[0])


def _hartley(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 and the mean distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if mean_dist == 0:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def eight_point(corrs) -> np.ndarray:
    """Normalized 8-point estimate of E, projected to rank 2 with unit Frobenius norm.

    The sign is fixed so the entry of largest magnitude is positive.
    """
    corrs = np.asarray(corrs, dtype=np.float64).reshape(-1, 4)
    if corrs.shape[0] < 8:
        raise ContractError(f"eight_point needs >= 8 correspondences, got {corrs.shape[0]}")
    T1 = _hartley(corrs[:, :2])
    T2 = _hartley(corrs[:, 2:])
    x, xp = _homogeneous(corrs)
    x = x @ T1.T
    xp = xp @ T2.T
    # row k of A dotted with vec(E) (row-major) equals x'_k^T E x_k
    A = (xp[:, :, None] * x[:, None, :]).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int((s > 1e-10 * s[0]).sum())
    if rank < 8:
        raise DegenerateConfiguration(f"linear system has rank {rank} < 8")
    E = Vt[-1].reshape(3, 3)
    E = T2.T @ E @ T1
    U, sv, Vt = np.linalg.svd(E)
    E = U @ np.diag([sv[0], sv[1], 0.0]) @ Vt
    E = normalize_e(E)
    if E.flat[np.argmax(np.abs(E))] < 0:
        E = -E
    return E


def e_deviation(e_hat, e_gt) -> float:
    """Sign-aligned squared Frobenius distance of the unit-normalized matrices, in [0, 4]."""
    a = normalize_e(e_hat)
    b = normalize_e(e_gt)
    return float(min(((a - b) ** 2).sum(), ((a + b) ** 2).sum()))


@dataclass
class RansacResult:
    e: np.ndarray
    mask: np.ndarray
    n_inliers: int
    degraded: bool

    def __iter__(self):
        return iter((self.e, self.mask))


def ransac(corrs, iterations: int = 1000, inlier_threshold: float = 1e-4, seed: int = 0) -> RansacResult:
    """Hypothesize-and-verify E estimation with a final refit on the best consensus.

    Hypothesis ``i`` draws its 8-point sample from a generator keyed on
    ``(seed, i)``, so the sample sequence does not depend on evaluation order.
    """
    corrs = np.asarray(corrs, dtype=np.float64).reshape(-1, 4)
    n = corrs.shape[0]
    if iterations < 1:
        raise ContractError("ransac needs at least one iteration")
    if n < 8:
        raise ContractError(f"ransac needs >= 8 correspondences, got {n}")
    best_e, best_count, best_mask = None, -1, None
    for i in range(iterations):
        rng = np.random.Generator(np.random.Philox(key=seed, counter=i))
        sample = rng.choice(n, size=8, replace=False)
        try:
            E = eight_point(corrs[sample])
        except DegenerateConfiguration:
            continue
        mask = epipolar_residuals(corrs, E) < inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_e, best_count, best_mask = E, count, mask
    if best_e is None:
        return RansacResult(np.eye(3) / np.sqrt(3.0), np.zeros(n, dtype=bool), 0, True)
    if best_count < 8:
        return RansacResult(best_e, best_mask, best_count, True)
    try:
        E = eight_point(corrs[best_mask])
    except DegenerateConfiguration:
        return RansacResult(best_e, best_mask, best_count, True)
    mask = epipolar_residuals(corrs, E) < inlier_threshold
    return RansacResult(E, mask, int(mask.sum()), False)
