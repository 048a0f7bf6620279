"""Two-view midpoint triangulation on bearing vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .lie import Se3Pose

DEFAULT_PARALLAX_MIN_DEG = 0.5


class TriangulationStatus(str, Enum):
    OK = "ok"
    BEHIND_CAMERA = "behind_camera"
    LOW_PARALLAX = "low_parallax"
    ILL_CONDITIONED = "ill_conditioned"


@dataclass(frozen=True)
class TriangulationResult:
    point: np.ndarray  # frame-1 coordinates
    depth1: float
    depth2: float
    parallax: float  # radians
    status: TriangulationStatus

    @property
    def ok(self) -> bool:
        return self.status is TriangulationStatus.OK


def midpoint_batch(r1: np.ndarray, r2: np.ndarray, R: np.ndarray, t: np.ndarray):
    """Vectorized midpoint triangulation.

    ``R, t`` map frame-1 coordinates into frame 2 (``X2 = R X1 + t``).
    Returns ``(points, depth1, depth2, parallax, cross_norm)`` where points
    are in frame 1 and depths are signed projections onto each bearing.
    """
    r1 = np.atleast_2d(r1)
    r2 = np.atleast_2d(r2)
    c2 = -R.T @ t
    d2 = r2 @ R  # rows are R^T r2
    b = np.sum(r1 * d2, axis=1)
    d = r1 @ c2
    e = d2 @ c2
    cross = np.linalg.norm(np.cross(r1, d2), axis=1)
    denom = 1.0 - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        lam1 = (d - b * e) / denom
        lam2 = (b * d - e) / denom
    X = 0.5 * (lam1[:, None] * r1 + c2 + lam2[:, None] * d2)
    depth1 = np.sum(X * r1, axis=1)
    depth2 = np.sum((X @ R.T + t) * r2, axis=1)
    parallax = np.arccos(np.clip(b, -1.0, 1.0))
    return X, depth1, depth2, parallax, cross


def classify(depth1, depth2, parallax, cross, parallax_min: float) -> list:
    """Per-point status; later checks take precedence."""
    codes = np.zeros(np.shape(depth1), dtype=int)
    codes[parallax < parallax_min] = 1
    codes[(depth1 <= 0) | (depth2 <= 0)] = 2
    codes[~(cross >= 1e-12)] = 3
    order = (TriangulationStatus.OK, TriangulationStatus.LOW_PARALLAX,
             TriangulationStatus.BEHIND_CAMERA, TriangulationStatus.ILL_CONDITIONED)
    return [order[c] for c in codes.ravel()]


def triangulate(r1, r2, T21: Se3Pose,
                parallax_min_deg: float = DEFAULT_PARALLAX_MIN_DEG) -> TriangulationResult:
    """Triangulate one correspondence; ``T21`` maps frame 1 into frame 2."""
    X, d1, d2, par, cross = midpoint_batch(np.asarray(r1, float), np.asarray(r2, float),
                                          T21.R, T21.t)
    status = classify(d1, d2, par, cross, math.radians(parallax_min_deg))[0]
    point = X[0] if status is not TriangulationStatus.ILL_CONDITIONED else np.full(3, np.nan)
    return TriangulationResult(point, float(d1[0]), float(d2[0]), float(par[0]), status)
