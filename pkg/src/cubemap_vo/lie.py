"""Minimal SO(3)/SE(3) toolbox.

Tangent vectors are ordered ``xi = (phi, rho)``: rotation vector first,
translation part second. Increments are applied on the left,
``T <- exp(xi^) T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        # second-order series keeps the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        if w @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] = -U[:, -1]
    return U @ Vt


def rotation_angle(R: np.ndarray) -> float:
    """Angle (radians) of a rotation matrix."""
    return float(np.linalg.norm(so3_log(R)))


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Se3Pose:
    """Rigid transform ``x -> R x + t``.

    Which frames it maps between is up to the caller; in the optimizer it is
    always ``T_BW`` (world to body), in trajectories camera-to-world.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Se3Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Se3Pose":
        return Se3Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Se3Pose") -> "Se3Pose":
        # re-project so that long composition chains stay on SO(3)
        return Se3Pose(nearest_rotation(self.R @ other.R), self.R @ other.t + self.t)

    def act(self, points: np.ndarray) -> np.ndarray:
        """Transform a point (3,) or a batch of points (N, 3)."""
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.t

    def retract(self, xi: np.ndarray) -> "Se3Pose":
        """Left-multiplied increment ``exp(xi^) * self``."""
        return se3_exp(xi) @ self

    @property
    def center(self) -> np.ndarray:
        """Origin of the target frame expressed in the source frame (``-R^T t``).

        For ``T_BW`` this is the camera position in the world.
        """
        return -self.R.T @ self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) < tol)


def se3_exp(xi: np.ndarray) -> Se3Pose:
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return Se3Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))
