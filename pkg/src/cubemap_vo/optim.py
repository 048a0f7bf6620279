"""Multi-pinhole reprojection residuals, Jacobians and Levenberg-Marquardt solvers.

Projection chain for a world point ``P`` seen on face ``i``::

    P2 = T_BW P,   P1 = R_{C_i B} P2,   u = pi(K P1)

Residuals are ``u_measured - u_predicted``; pose increments are applied on
the left, ``T_BW <- exp(xi^) T_BW`` with ``xi = (phi, rho)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .calib import (FACE_ROTATIONS, CubemapCamera, FacePoint, faces_of,
                    unproject_points)
from .errors import (ConfigurationError, CrossFaceError, DegenerateError,
                     InsufficientDataError, NumericError)
from .lie import Se3Pose

HUBER_DEFAULT = 2.45  # px, sqrt of the 2-DoF 95% chi-square quantile


class MetricKind(str, Enum):
    RU = "r_u"
    RA1 = "r_a1"
    RA2 = "r_a2"
    RT = "r_t"
    RF = "r_f"

    @classmethod
    def parse(cls, value) -> "MetricKind":
        if isinstance(value, cls):
            return value
        v = str(value).strip().lower()
        if not v.startswith("r_"):
            v = "r_" + v
        return cls(v)


@dataclass(frozen=True)
class CubemapObservation:
    point_id: int
    pose_id: int
    fp: FacePoint
    sigma: float = 1.0


# --------------------------------------------------------------------------
# r_u residual and analytic Jacobians


def _batch_skew(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def ru_terms(cam: CubemapCamera, R: np.ndarray, t: np.ndarray, P: np.ndarray,
             faces: np.ndarray, uv: np.ndarray, jacobians: bool = True):
    """Vectorized r_u residuals on the *measured* faces.

    ``R`` is ``(3, 3)`` or per-observation ``(N, 3, 3)``; ``t`` likewise.
    Returns ``(residual (N,2), depth (N,), J_pose (N,2,6), J_point (N,2,3))``
    (Jacobians ``None`` when not requested). Depth is ``P1.z``.
    """
    if R.ndim == 2:
        P2 = P @ R.T + t
    else:
        P2 = np.einsum("nij,nj->ni", R, P) + t
    RC = FACE_ROTATIONS[faces]
    P1 = np.einsum("nij,nj->ni", RC, P2)
    z = P1[:, 2]
    f = cam.focal
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = 1.0 / z
    pred = f * P1[:, :2] * inv_z[:, None] + (cam.face_size - 1) / 2.0
    res = uv - pred
    if not jacobians:
        return res, z, None, None
    n = len(P)
    du = np.zeros((n, 2, 3))
    du[:, 0, 0] = f * inv_z
    du[:, 1, 1] = f * inv_z
    du[:, 0, 2] = -f * P1[:, 0] * inv_z**2
    du[:, 1, 2] = -f * P1[:, 1] * inv_z**2
    A = du @ RC  # d u_pred / d P2
    J_pose = np.empty((n, 2, 6))
    # d P2 / d xi = [-P2^, I]; residual carries the leading minus
    J_pose[:, :, :3] = A @ _batch_skew(P2)
    J_pose[:, :, 3:] = -A
    Rw = R if R.ndim == 3 else np.broadcast_to(R, (n, 3, 3))
    J_point = -A @ Rw
    return res, z, J_pose, J_point


def _check_face(cam: CubemapCamera, pose: Se3Pose, point, obs: CubemapObservation):
    P2 = pose.act(np.asarray(point, float))
    predicted = faces_of(P2[None], cam.active_faces)[0]
    if predicted != int(obs.fp.face):
        raise CrossFaceError(
            f"landmark projects to face {predicted}, measured on {obs.fp.face.name}")
    P1 = FACE_ROTATIONS[int(obs.fp.face)] @ P2
    if P1[2] <= 1e-9:
        raise DegenerateError("non-positive depth on the measured face")


def _single(cam, pose, point, obs):
    _check_face(cam, pose, point, obs)
    return ru_terms(cam, pose.R, pose.t, np.asarray(point, float)[None],
                    np.array([int(obs.fp.face)]), obs.fp.uv[None])


def residual_ru(cam: CubemapCamera, pose: Se3Pose, point, obs: CubemapObservation) -> np.ndarray:
    """Pixel residual ``u_measured - u_predicted`` on the observation's face."""
    return _single(cam, pose, point, obs)[0][0]


def jacobian_pose(cam: CubemapCamera, pose: Se3Pose, point, obs: CubemapObservation) -> np.ndarray:
    """2x6 derivative of :func:`residual_ru` w.r.t. a left increment ``(phi, rho)``."""
    return _single(cam, pose, point, obs)[2][0]


def jacobian_point(cam: CubemapCamera, pose: Se3Pose, point, obs: CubemapObservation) -> np.ndarray:
    """2x3 derivative of :func:`residual_ru` w.r.t. the world point."""
    return _single(cam, pose, point, obs)[3][0]


# --------------------------------------------------------------------------
# Bearing-vector metrics


def metric_batch(kind: MetricKind, b_p: np.ndarray, b_m: np.ndarray) -> np.ndarray:
    """Row-wise metric between predicted and measured unit bearings, shape ``(N, k)``."""
    kind = MetricKind.parse(kind)
    dot = np.sum(b_p * b_m, axis=-1)
    if kind is MetricKind.RA1:
        # equals arccos(clip(dot)) but keeps full precision near zero
        cross = np.linalg.norm(np.cross(b_p, b_m), axis=-1)
        return np.arctan2(cross, dot)[..., None]
    if kind is MetricKind.RA2:
        # 1 - dot for unit vectors, without cancellation
        d = b_m - b_p
        return 0.5 * np.sum(d * d, axis=-1)[..., None]
    if kind is MetricKind.RT:
        return b_m - dot[..., None] * b_p
    if kind is MetricKind.RF:
        return b_m - b_p
    raise ValueError("r_u is a pixel residual; use residual_ru")


def residual_metric(kind, b_p, b_m) -> np.ndarray:
    """Angular (r_a1, r_a2), tangential (r_t) or vector-difference (r_f) residual."""
    out = metric_batch(kind, np.asarray(b_p, float)[None], np.asarray(b_m, float)[None])
    return out[0]


# --------------------------------------------------------------------------
# Robust cost helpers


def _robust(sq: np.ndarray, delta: float | None):
    """Per-block Huber cost and IRLS weights from squared block norms."""
    if delta is None:
        return sq, np.ones_like(sq)
    norm = np.sqrt(sq)
    inlier = norm <= delta
    cost = np.where(inlier, sq, 2.0 * delta * norm - delta * delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(inlier, 1.0, delta / norm)
    return cost, w


STEP_TOL = 1e-10
REL_DECREASE_TOL = 1e-12
LAMBDA_MAX = 1e8


# --------------------------------------------------------------------------
# Pose-only optimization


@dataclass
class PoseResult:
    pose: Se3Pose
    cost: float
    iterations: int
    converged: bool
    n_used: int
    cost_history: list = field(default_factory=list)


class _PoseProblem:
    def __init__(self, cam, P, faces, uv, sigma, metric, huber):
        self.cam, self.P, self.faces, self.uv = cam, P, faces, uv
        self.sigma = sigma
        self.metric = metric
        if metric is MetricKind.RU:
            self.delta = huber
        else:
            self.b_m = unproject_points(cam, faces, uv)
            self.delta = None if huber is None else huber / cam.focal

    def residuals(self, pose: Se3Pose):
        if self.metric is MetricKind.RU:
            r, z, _, _ = ru_terms(self.cam, pose.R, pose.t, self.P, self.faces, self.uv, False)
            if not np.all(z > 1e-9):
                return None
            return r / self.sigma[:, None]
        P2 = pose.act(self.P)
        norm = np.linalg.norm(P2, axis=1)
        if not np.all(norm > 1e-12):
            return None
        return metric_batch(self.metric, P2 / norm[:, None], self.b_m)

    def cost(self, r):
        if r is None:
            return math.inf
        c, _ = _robust(np.sum(r * r, axis=1), self.delta)
        return float(c.sum())

    def linearize(self, pose: Se3Pose, r):
        if self.metric is MetricKind.RU:
            _, _, J, _ = ru_terms(self.cam, pose.R, pose.t, self.P, self.faces, self.uv)
            J = J / self.sigma[:, None, None]
        else:
            J = self._numeric_jacobian(pose)
        _, w = _robust(np.sum(r * r, axis=1), self.delta)
        H = np.einsum("n,nki,nkj->ij", w, J, J)
        g = np.einsum("n,nki,nk->i", w, J, r)
        return H, g

    def _numeric_jacobian(self, pose: Se3Pose, h: float = 1e-6):
        cols = []
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            rp = self.residuals(pose.retract(d))
            rm = self.residuals(pose.retract(-d))
            cols.append((rp - rm) / (2 * h))
        return np.stack(cols, axis=-1)


def optimize_pose(cam: CubemapCamera, init: Se3Pose, points, observations: Sequence[CubemapObservation],
                  metric=MetricKind.RU, huber: float | None = None,
                  max_iterations: int = 100) -> PoseResult:
    """Refine ``T_BW`` against fixed map points.

    ``points`` is indexed by ``obs.point_id`` (array or mapping). Observations
    whose landmark is predicted on another face at ``init`` are dropped.
    """
    metric = MetricKind.parse(metric)
    obs = list(observations)
    if len(obs) < 3:
        raise InsufficientDataError(f"pose optimization needs >= 3 observations, got {len(obs)}")
    P = np.array([points[o.point_id] for o in obs], float)
    faces = np.array([int(o.fp.face) for o in obs])
    uv = np.array([o.fp.uv for o in obs])
    sigma = np.array([o.sigma for o in obs], float)
    predicted = faces_of(init.act(P), cam.active_faces)
    keep = predicted == faces
    if keep.sum() < 3:
        raise InsufficientDataError("fewer than 3 observations on their predicted faces")
    prob = _PoseProblem(cam, P[keep], faces[keep], uv[keep], sigma[keep], metric, huber)

    pose = init
    r = prob.residuals(pose)
    cost = prob.cost(r)
    if not math.isfinite(cost):
        raise DegenerateError("initial pose puts observed points behind their faces")
    history = [cost]
    lam = 1e-4  # relative to the Hessian diagonal
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        H, g = prob.linearize(pose, r)
        accepted = False
        while lam <= LAMBDA_MAX:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if np.linalg.norm(delta) < STEP_TOL:
                converged = True
                break
            cand = pose.retract(delta)
            r_c = prob.residuals(cand)
            c_c = prob.cost(r_c)
            if c_c <= cost:
                decrease = cost - c_c
                pose, r, cost = cand, r_c, c_c
                history.append(cost)
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                if decrease <= REL_DECREASE_TOL * history[-2] or cost == 0.0:
                    converged = True
                break
            lam *= 10.0
        if converged or not accepted:
            converged = converged or not accepted
            break
    return PoseResult(pose, cost, it, converged, int(keep.sum()), history)


# --------------------------------------------------------------------------
# Bundle adjustment


@dataclass
class BAResult:
    poses: object
    points: object
    rms: float
    initial_rms: float
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)


def _as_dict(items):
    if isinstance(items, Mapping):
        return dict(items), True
    return {i: v for i, v in enumerate(items)}, False


def reprojection_rms(cam: CubemapCamera, poses, points, observations) -> float:
    pose_map, _ = _as_dict(poses)
    pt_map, _ = _as_dict(points)
    obs = list(observations)
    R = np.array([pose_map[o.pose_id].R for o in obs])
    t = np.array([pose_map[o.pose_id].t for o in obs])
    P = np.array([pt_map[o.point_id] for o in obs], float)
    res, _, _, _ = ru_terms(cam, R, t, P, np.array([int(o.fp.face) for o in obs]),
                            np.array([o.fp.uv for o in obs]), False)
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


class _BAProblem:
    def __init__(self, cam, pose_map, pt_map, obs, fixed, scale_anchor, huber):
        self.cam = cam
        self.huber = huber
        self.pose_ids = sorted(pose_map)
        self.free = [p for p in self.pose_ids if p not in fixed]
        self.free_index = {p: i for i, p in enumerate(self.free)}
        self.pt_ids = sorted({o.point_id for o in obs})
        self.pt_index = {p: i for i, p in enumerate(self.pt_ids)}
        self.obs_pose = np.array([self.pose_ids.index(o.pose_id) for o in obs])
        self.obs_free = np.array([self.free_index.get(o.pose_id, -1) for o in obs])
        self.obs_pt = np.array([self.pt_index[o.point_id] for o in obs])
        self.faces = np.array([int(o.fp.face) for o in obs])
        self.uv = np.array([o.fp.uv for o in obs])
        self.sigma = np.array([o.sigma for o in obs], float)
        self.anchor = None
        if scale_anchor is not None:
            ref = next(p for p in self.pose_ids if p in fixed)
            c_ref = pose_map[ref].center
            d0 = np.linalg.norm(pose_map[scale_anchor].center - c_ref)
            if d0 <= 0:
                raise ConfigurationError("scale anchor coincides with the fixed pose")
            self.anchor = (self.free_index[scale_anchor], c_ref, d0, 1e3 / d0)

    def unpack(self, pose_map, pt_map):
        poses = [pose_map[p] for p in self.pose_ids]
        pts = np.array([pt_map[p] for p in self.pt_ids], float)
        return poses, pts

    def residuals(self, poses, pts):
        R = np.array([p.R for p in poses])[self.obs_pose]
        t = np.array([p.t for p in poses])[self.obs_pose]
        res, z, _, _ = ru_terms(self.cam, R, t, pts[self.obs_pt], self.faces, self.uv, False)
        if not np.all(z > 1e-9):
            return None
        return res

    def _anchor_residual(self, poses):
        if self.anchor is None:
            return 0.0
        k, c_ref, d0, w = self.anchor
        pose = poses[self.pose_ids.index(self.free[k])]
        return w * (np.linalg.norm(pose.center - c_ref) - d0)

    def cost(self, poses, pts, res=None):
        if res is None:
            res = self.residuals(poses, pts)
        if res is None:
            return math.inf
        c, _ = _robust(np.sum((res / self.sigma[:, None]) ** 2, axis=1), self.huber)
        return float(c.sum()) + float(self._anchor_residual(poses)) ** 2

    def normal_equations(self, poses, pts, res):
        nF, nP = len(self.free), len(self.pt_ids)
        R = np.array([p.R for p in poses])[self.obs_pose]
        t = np.array([p.t for p in poses])[self.obs_pose]
        r, _, Jx, Jl = ru_terms(self.cam, R, t, pts[self.obs_pt], self.faces, self.uv)
        r = r / self.sigma[:, None]
        Jx = Jx / self.sigma[:, None, None]
        Jl = Jl / self.sigma[:, None, None]
        _, w = _robust(np.sum(r * r, axis=1), self.huber)
        Hll = np.zeros((nP, 3, 3))
        gl = np.zeros((nP, 3))
        np.add.at(Hll, self.obs_pt, np.einsum("n,nki,nkj->nij", w, Jl, Jl))
        np.add.at(gl, self.obs_pt, np.einsum("n,nki,nk->ni", w, Jl, r))
        Hpp = np.zeros((nF, 6, 6))
        gp = np.zeros((nF, 6))
        Hpl = np.zeros((nF, nP, 6, 3))
        m = self.obs_free >= 0
        if m.any():
            fi, pi = self.obs_free[m], self.obs_pt[m]
            wm, Jxm, Jlm, rm = w[m], Jx[m], Jl[m], r[m]
            np.add.at(Hpp, fi, np.einsum("n,nki,nkj->nij", wm, Jxm, Jxm))
            np.add.at(gp, fi, np.einsum("n,nki,nk->ni", wm, Jxm, rm))
            np.add.at(Hpl, (fi, pi), np.einsum("n,nki,nkj->nij", wm, Jxm, Jlm))
        if self.anchor is not None:
            k = self.anchor[0]
            pid = self.pose_ids.index(self.free[k])
            ra = self._anchor_residual(poses)
            h = 1e-7
            ja = np.zeros(6)
            for i in range(6):
                d = np.zeros(6)
                d[i] = h
                trial = list(poses)
                trial[pid] = poses[pid].retract(d)
                plus = self._anchor_residual(trial)
                trial[pid] = poses[pid].retract(-d)
                ja[i] = (plus - self._anchor_residual(trial)) / (2 * h)
            Hpp[k] += np.outer(ja, ja)
            gp[k] += ja * ra
        return Hpp, gp, Hpl, Hll, gl

    def solve(self, Hpp, gp, Hpl, Hll, gl, lam):
        nF, nP = len(self.free), len(self.pt_ids)
        diag_l = np.maximum(np.einsum("nii->ni", Hll), 1e-12)
        Hll_d = Hll.copy()
        Hll_d[:, [0, 1, 2], [0, 1, 2]] += lam * diag_l
        Hll_inv = np.linalg.inv(Hll_d)
        if nF == 0:
            dl = -np.einsum("nij,nj->ni", Hll_inv, gl)
            return np.zeros((0, 6)), dl
        diag_p = np.maximum(np.einsum("fii->fi", Hpp), 1e-12)
        S = np.zeros((6 * nF, 6 * nF))
        for f in range(nF):
            blk = Hpp[f].copy()
            blk[np.arange(6), np.arange(6)] += lam * diag_p[f]
            S[6 * f:6 * f + 6, 6 * f:6 * f + 6] = blk
        Y = np.einsum("fnij,njk->fnik", Hpl, Hll_inv)
        Y2 = Y.transpose(0, 2, 1, 3).reshape(6 * nF, 3 * nP)
        W2 = Hpl.transpose(0, 2, 1, 3).reshape(6 * nF, 3 * nP)
        S -= Y2 @ W2.T
        rhs = -gp.reshape(-1) + Y2 @ gl.reshape(-1)
        dp = np.linalg.solve(S, rhs)
        back = np.einsum("fnij,fi->nj", Hpl, dp.reshape(nF, 6))
        dl = -np.einsum("nij,nj->ni", Hll_inv, gl + back)
        return dp.reshape(nF, 6), dl

    def apply(self, poses, pts, dp, dl):
        new_poses = list(poses)
        for k, pid in enumerate(self.free):
            i = self.pose_ids.index(pid)
            new_poses[i] = poses[i].retract(dp[k])
        return new_poses, pts + dl


def bundle_adjust(cam: CubemapCamera, poses, points, observations: Sequence[CubemapObservation],
                  fixed, scale_anchor: int | None = None, huber: float | None = None,
                  max_iterations: int = 100) -> BAResult:
    """Joint LM over free poses and all observed points with r_u residuals.

    Gauge: at least one fixed pose plus either a second fixed pose or a
    ``scale_anchor`` pose whose distance to the first fixed pose is held.
    ``poses``/``points`` may be sequences or mappings; the result mirrors
    the input containers.
    """
    pose_map, poses_is_map = _as_dict(poses)
    pt_map, pts_is_map = _as_dict(points)
    fixed = set(fixed) & set(pose_map)
    if not fixed:
        raise ConfigurationError("bundle adjustment needs at least one fixed pose")
    if len(fixed) < 2 and scale_anchor is None:
        raise ConfigurationError("scale gauge unfixed: fix a second pose or give scale_anchor")
    if scale_anchor is not None and (scale_anchor in fixed or scale_anchor not in pose_map):
        raise ConfigurationError("scale_anchor must be a free pose")

    obs = [o for o in observations if o.pose_id in pose_map]
    R = np.array([pose_map[o.pose_id].R for o in obs])
    t = np.array([pose_map[o.pose_id].t for o in obs])
    P = np.array([pt_map[o.point_id] for o in obs], float)
    P2 = np.einsum("nij,nj->ni", R, P) + t
    keep = faces_of(P2, cam.active_faces) == np.array([int(o.fp.face) for o in obs])
    obs = [o for o, k in zip(obs, keep) if k]
    counts: dict[int, int] = {}
    for o in obs:
        counts[o.point_id] = counts.get(o.point_id, 0) + 1
    if any(c < 2 for c in counts.values()):
        raise ConfigurationError("every point must be observed at least twice")

    prob = _BAProblem(cam, pose_map, pt_map, obs, fixed, scale_anchor, huber)
    pose_list, pts = prob.unpack(pose_map, pt_map)
    res = prob.residuals(pose_list, pts)
    if res is None:
        raise DegenerateError("initial configuration has points behind their faces")
    initial_rms = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    cost = prob.cost(pose_list, pts, res)
    history = [cost]
    lam = 1e-4
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        normal = prob.normal_equations(pose_list, pts, res)
        accepted = False
        while lam <= LAMBDA_MAX:
            try:
                dp, dl = prob.solve(*normal, lam)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            step = math.sqrt(float(np.sum(dp * dp) + np.sum(dl * dl)))
            if step < STEP_TOL:
                converged = True
                break
            cand_poses, cand_pts = prob.apply(pose_list, pts, dp, dl)
            cand_res = prob.residuals(cand_poses, cand_pts)
            c_c = prob.cost(cand_poses, cand_pts, cand_res)
            if c_c <= cost:
                decrease = cost - c_c
                pose_list, pts, res, cost = cand_poses, cand_pts, cand_res, c_c
                history.append(cost)
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                if decrease <= REL_DECREASE_TOL * history[-2] or cost == 0.0:
                    converged = True
                break
            lam *= 10.0
        else:
            if not accepted and not converged and it == 1:
                raise NumericError("normal equations stayed singular up to the damping limit")
        if converged or not accepted:
            converged = True
            break

    rms = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
    out_poses = dict(pose_map)
    for pid, p in zip(prob.pose_ids, pose_list):
        out_poses[pid] = p
    out_pts = dict(pt_map)
    for pid, x in zip(prob.pt_ids, pts):
        out_pts[pid] = x
    if not poses_is_map:
        out_poses = [out_poses[i] for i in range(len(out_poses))]
    if not pts_is_map:
        out_pts = np.array([out_pts[i] for i in range(len(out_pts))], float)
    return BAResult(out_poses, out_pts, rms, initial_rms, it, converged, history)
