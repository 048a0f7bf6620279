"""Relative pose from bearing correspondences on the unit sphere.

Convention: ``X2 = R X1 + t`` and ``E = [t]x R`` so that ``r2^T E r1 = 0``.
The inlier test maps a pixel band around the epipolar line on the cube
face onto the sphere; its half-width ``sin(theta)`` therefore depends on
where the measurement sits on its face.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calib import FACE_ROTATIONS, CubemapCamera, FacePoint, unproject_points
from .errors import AmbiguousError, DegenerateError, NoModelError, ValidationError
from .lie import skew
from .triangulate import midpoint_batch


@dataclass(frozen=True)
class EssentialModel:
    E: np.ndarray

    def candidates(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """The four ``(R, t)`` factorizations, ``|t| = 1``."""
        U, _, Vt = np.linalg.svd(self.E)
        if np.linalg.det(U) < 0:
            U = -U
        if np.linalg.det(Vt) < 0:
            Vt = -Vt
        W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        Ra = U @ W @ Vt
        Rb = U @ W.T @ Vt
        t = U[:, 2]
        return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


@dataclass(frozen=True)
class Correspondence:
    r1: np.ndarray
    r2: np.ndarray
    fp1: FacePoint
    fp2: FacePoint

    @classmethod
    def from_face_points(cls, cam: CubemapCamera, fp1: FacePoint, fp2: FacePoint):
        r1 = unproject_points(cam, [int(fp1.face)], fp1.uv[None])[0]
        r2 = unproject_points(cam, [int(fp2.face)], fp2.uv[None])[0]
        return cls(r1, r2, fp1, fp2)


@dataclass(frozen=True)
class ThresholdGeometry:
    th: float
    f: float
    n_face: np.ndarray
    e_dir: np.ndarray
    len_OO: float
    len_PO: float
    tan_phi: float
    tan_phi_theta: float
    tan_theta: float
    sin_theta: float


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 2000
    confidence: float = 0.99
    th: float = 1.0
    sample_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValidationError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.sample_size != 8:
            raise ValidationError("the linear solver needs samples of exactly 8")
        if self.th <= 0:
            raise ValidationError("th must be positive")


@dataclass(frozen=True)
class CorrespondenceArrays:
    """Column-stacked view of a correspondence list."""

    r1: np.ndarray
    r2: np.ndarray
    face1: np.ndarray
    uv1: np.ndarray
    face2: np.ndarray
    uv2: np.ndarray

    @classmethod
    def from_list(cls, corrs) -> "CorrespondenceArrays":
        if isinstance(corrs, CorrespondenceArrays):
            return corrs
        corrs = list(corrs)
        if not corrs:
            empty3, empty2, no_face = np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0, int)
            return cls(empty3, empty3, no_face, empty2, no_face, empty2)
        return cls(
            np.array([c.r1 for c in corrs], float),
            np.array([c.r2 for c in corrs], float),
            np.array([int(c.fp1.face) for c in corrs]),
            np.array([c.fp1.uv for c in corrs]),
            np.array([int(c.fp2.face) for c in corrs]),
            np.array([c.fp2.uv for c in corrs]),
        )

    def __len__(self):
        return len(self.r1)

    def subset(self, idx) -> "CorrespondenceArrays":
        return CorrespondenceArrays(self.r1[idx], self.r2[idx], self.face1[idx],
                                    self.uv1[idx], self.face2[idx], self.uv2[idx])


# --------------------------------------------------------------------------
# Linear estimation


def project_to_essential_manifold(M: np.ndarray) -> np.ndarray:
    """Closest matrix with singular values ``(1, 1, 0)``."""
    U, _, Vt = np.linalg.svd(M)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def essential_from_bearings(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    if len(r1) < 8:
        raise DegenerateError("need at least 8 correspondences")
    # r2^T E r1 = <outer(r2, r1), E> with E flattened row-major
    A = (r2[:, :, None] * r1[:, None, :]).reshape(len(r1), 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s = np.concatenate([s, np.zeros(9 - len(s))])
    if s[7] - s[8] < 1e-12 * max(s[0], 1.0):
        raise DegenerateError("design matrix has a multi-dimensional null space")
    return project_to_essential_manifold(Vt[-1].reshape(3, 3))


def estimate_essential_8pt(corrs) -> EssentialModel:
    data = CorrespondenceArrays.from_list(corrs)
    return EssentialModel(essential_from_bearings(data.r1, data.r2))


def essential_from_motion(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return skew(np.asarray(t, float)) @ np.asarray(R, float)


# --------------------------------------------------------------------------
# Residual and spherical threshold


def epipolar_residual(E: np.ndarray, r1, r2) -> float:
    """Signed sine of the angle between ``r2`` and the epipolar plane of ``r1``."""
    n = np.asarray(E, float) @ np.asarray(r1, float)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise DegenerateError("E r1 vanishes (r1 is the epipole)")
    return float(np.asarray(r2, float) @ n / norm)


def _residuals(E: np.ndarray, r1: np.ndarray, r2: np.ndarray):
    n = r1 @ E.T
    norm = np.linalg.norm(n, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        res = np.sum(r2 * n, axis=1) / norm
    return res, n, norm >= 1e-12


def _threshold_terms(cam: CubemapCamera, faces, uv, n_body, th):
    f = cam.focal
    n = n_body / np.linalg.norm(n_body, axis=-1, keepdims=True)
    n_face = np.einsum("nij,nj->ni", FACE_ROTATIONS[faces], n)
    # e = n x (0, 0, 1): direction of the epipolar line on the face plane
    e = np.stack([n_face[:, 1], -n_face[:, 0], np.zeros(len(n_face))], axis=1)
    e_norm = np.linalg.norm(e, axis=1)
    OP = uv - (cam.face_size - 1) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        len_OO = np.abs(np.sum(e[:, :2] * OP, axis=1)) / e_norm
    len_PO = np.sqrt(np.maximum(np.sum(OP * OP, axis=1) - len_OO**2, 0.0))
    len_CO2 = np.sqrt(f * f + len_OO**2)
    tan_phi_theta = (th + len_PO) / len_CO2
    tan_phi = len_PO / len_CO2
    tan_theta = (tan_phi_theta - tan_phi) / (1.0 + tan_phi_theta * tan_phi)
    sin_theta = tan_theta / np.sqrt(tan_theta**2 + 1.0)
    return dict(n_face=n_face, e=e, e_norm=e_norm, len_OO=len_OO, len_PO=len_PO,
                tan_phi=tan_phi, tan_phi_theta=tan_phi_theta, tan_theta=tan_theta,
                sin_theta=sin_theta)


def sin_theta_min(cam: CubemapCamera, th: float) -> float:
    """Fallback half-width used when the epipolar plane is parallel to the face."""
    return th / math.sqrt(th * th + cam.focal**2)


def sin_theta_batch(cam: CubemapCamera, faces, uv, n_body, th: float) -> np.ndarray:
    """Vectorized threshold; degenerate rows fall back to :func:`sin_theta_min`."""
    terms = _threshold_terms(cam, np.asarray(faces, int), np.atleast_2d(uv),
                             np.atleast_2d(n_body), th)
    degenerate = ~(terms["e_norm"] >= 1e-9)
    return np.where(degenerate, sin_theta_min(cam, th), terms["sin_theta"])


def inlier_threshold_sin_theta(cam: CubemapCamera, fp: FacePoint, n_body,
                               th: float = 1.0) -> tuple[float, ThresholdGeometry]:
    """Sine of the angular inlier band at face point ``fp``.

    ``n_body`` is the epipolar-plane normal (``E r1``) in the body frame of
    the image containing ``fp``. A segment of ``th`` pixels perpendicular to
    the epipolar line is mapped to the angle it subtends at the face centre
    of projection.
    """
    if not cam.is_active(fp.face):
        raise ValidationError(f"face {fp.face.name} is not active")
    terms = _threshold_terms(cam, np.array([int(fp.face)]), fp.uv[None],
                             np.asarray(n_body, float).reshape(1, 3), th)
    if not terms["e_norm"][0] >= 1e-9:
        raise DegenerateError("epipolar plane is parallel to the face plane")
    g = {k: v[0] for k, v in terms.items()}
    geom = ThresholdGeometry(th=th, f=cam.focal, n_face=g["n_face"], e_dir=g["e"],
                             len_OO=float(g["len_OO"]), len_PO=float(g["len_PO"]),
                             tan_phi=float(g["tan_phi"]),
                             tan_phi_theta=float(g["tan_phi_theta"]),
                             tan_theta=float(g["tan_theta"]),
                             sin_theta=float(g["sin_theta"]))
    return geom.sin_theta, geom


def inlier_mask(E: np.ndarray, data: CorrespondenceArrays, cam: CubemapCamera,
                th: float) -> np.ndarray:
    """Symmetric check: each bearing within its own image's spherical band."""
    res2, n2, ok2 = _residuals(E, data.r1, data.r2)
    res1, n1, ok1 = _residuals(E.T, data.r2, data.r1)
    ok = ok1 & ok2
    mask = np.zeros(len(data), dtype=bool)
    if not ok.any():
        return mask
    s2 = sin_theta_batch(cam, data.face2[ok], data.uv2[ok], n2[ok], th)
    s1 = sin_theta_batch(cam, data.face1[ok], data.uv1[ok], n1[ok], th)
    mask[ok] = (np.abs(res2[ok]) <= s2) & (np.abs(res1[ok]) <= s1)
    return mask


# --------------------------------------------------------------------------
# RANSAC and motion recovery


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int) -> float:
    p_good = inlier_ratio**sample_size
    if p_good >= 1.0:
        return 1.0
    if p_good <= 0.0:
        return math.inf
    return math.log1p(-confidence) / math.log1p(-p_good)


def ransac_essential(corrs, cfg: RansacConfig = RansacConfig(),
                     cam: CubemapCamera = CubemapCamera()):
    """Hypothesize-and-verify ``E`` with the face-aware spherical threshold.

    Returns ``(model, inlier_mask, iterations)``.
    """
    data = CorrespondenceArrays.from_list(corrs)
    n = len(data)
    if n < cfg.sample_size:
        raise NoModelError(f"need at least {cfg.sample_size} correspondences, got {n}")
    rng = np.random.default_rng(cfg.seed)
    best_count, best_E, best_mask = -1, None, None
    needed = float(cfg.max_iterations)
    iterations = 0
    while iterations < min(needed, cfg.max_iterations):
        iterations += 1
        idx = rng.choice(n, cfg.sample_size, replace=False)
        try:
            E = essential_from_bearings(data.r1[idx], data.r2[idx])
        except DegenerateError:
            continue
        mask = inlier_mask(E, data, cam, cfg.th)
        count = int(mask.sum())
        if count > best_count:
            best_count, best_E, best_mask = count, E, mask
            needed = max(1.0, _required_iterations(count / n, cfg.confidence, cfg.sample_size))
    if best_count < cfg.sample_size:
        raise NoModelError(f"best hypothesis has only {max(best_count, 0)} inliers")
    try:
        refined = essential_from_bearings(data.r1[best_mask], data.r2[best_mask])
        refined_mask = inlier_mask(refined, data, cam, cfg.th)
        if refined_mask.sum() >= best_count:
            best_E, best_mask = refined, refined_mask
    except DegenerateError:
        pass
    return EssentialModel(best_E), best_mask, iterations


def decompose_essential(E, corrs) -> tuple[np.ndarray, np.ndarray]:
    """Pick the ``(R, t)`` factorization with the most points in front of both views."""
    model = E if isinstance(E, EssentialModel) else EssentialModel(np.asarray(E, float))
    data = CorrespondenceArrays.from_list(corrs)
    if len(data) < 1:
        raise AmbiguousError("no correspondences to test cheirality")
    counts = []
    for R, t in model.candidates():
        _, d1, d2, _, cross = midpoint_batch(data.r1, data.r2, R, t)
        good = (cross >= 1e-12) & (d1 > 0) & (d2 > 0)
        counts.append(int(good.sum()))
    best = int(np.argmax(counts))
    if 2 * counts[best] <= len(data):
        raise AmbiguousError(f"no candidate has majority cheirality support: {counts}")
    R, t = model.candidates()[best]
    return R, t / np.linalg.norm(t)
