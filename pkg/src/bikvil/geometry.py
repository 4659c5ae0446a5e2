"""Small rigid-body helpers used across modules."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GeometryError


def kabsch(src: np.ndarray, dst: np.ndarray, cond_bound: float = 1e6):
    """Rigid fit ``dst ~ R @ src + t`` for stacked point sets.

    ``src`` and ``dst`` have shape (..., n, 3). Returns ``R`` (..., 3, 3) and
    ``t`` (..., 3). Raises GeometryError when the cross-covariance has rank < 2
    (ratio of its two largest singular values beyond ``cond_bound``).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs = src.mean(axis=-2, keepdims=True)
    cd = dst.mean(axis=-2, keepdims=True)
    H = np.swapaxes(src - cs, -1, -2) @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if np.any(S[..., 1] * cond_bound < S[..., 0]) or np.any(S[..., 0] == 0):
        raise GeometryError("rigid registration is ill-conditioned (collinear points)")
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(S.shape[:-1] + (3, 3))
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)
    t = cd[..., 0, :] - np.einsum("...ij,...j->...i", R, cs[..., 0, :])
    return R, t


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def exp_so3(rotvec) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_matrix()


def log_so3(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def geodesic_angle(Ra, Rb) -> np.ndarray:
    """Rotation angle of ``Ra^T Rb`` in radians; broadcasts over stacks."""
    rel = np.swapaxes(Ra, -1, -2) @ Rb
    c = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def chordal_mean(Rs: np.ndarray) -> np.ndarray:
    """Rotation closest in Frobenius norm to the arithmetic mean of ``Rs``."""
    return orthonormalize(np.mean(np.asarray(Rs, dtype=float), axis=0))


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()
