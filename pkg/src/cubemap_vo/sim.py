"""Synthetic scenes, a batch monocular VO driver and the metric benchmark.

World frame: y points down, the camera moves in the x-z plane. Data
association is taken from ground-truth point identity.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .calib import (CubemapCamera, FacePoint, FisheyeIntrinsics, Face,
                    equidistant_intrinsics, faces_of, lift_pixels, normalize,
                    project_points, unproject_points)
from .epipolar import CorrespondenceArrays, RansacConfig, decompose_essential, ransac_essential
from .errors import (CubemapError, ConfigurationError, InitializationError, ParseError,
                     ValidationError)
from .evaluation import Trajectory, ate_rmse, umeyama
from .lie import Se3Pose, random_rotation, rot_y
from .optim import (HUBER_DEFAULT, CubemapObservation, MetricKind, bundle_adjust,
                    optimize_pose, ru_terms)
from .remap import build_remap_table, remap_image
from .triangulate import DEFAULT_PARALLAX_MIN_DEG, midpoint_batch

TRAJECTORIES = ("straight", "circle", "uturn")
DISTRIBUTIONS = ("box", "corridor")


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 500
    distribution: str = "box"
    trajectory: str = "circle"
    n_frames: int = 60
    length: float = 20.0  # straight track / u-turn leg length
    radius: float = 10.0  # circle and u-turn radius
    box_margin: float = 10.0  # horizontal margin around the path
    box_height: float = 6.0
    corridor_width: float = 6.0
    corridor_height: float = 4.0
    min_range: float = 1.0
    max_range: float = 40.0
    mount_yaw_deg: float = 0.0
    fov_deg: float = 190.0
    face_size: int = 650
    sigma: float = 0.0
    outlier_fraction: float = 0.0
    frame_dt: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValidationError("n_frames must be >= 2")
        if self.n_points < 1:
            raise ValidationError("n_points must be >= 1")
        if self.sigma < 0:
            raise ValidationError("sigma must be >= 0")
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ValidationError("outlier_fraction must lie in [0, 0.5)")
        if self.trajectory not in TRAJECTORIES:
            raise ValidationError(f"trajectory must be one of {TRAJECTORIES}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValidationError(f"distribution must be one of {DISTRIBUTIONS}")
        if not 0 < self.min_range < self.max_range:
            raise ValidationError("need 0 < min_range < max_range")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SceneConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ParseError(f"line {lineno}: unknown key {key!r}")
            kind = type(getattr(defaults, key))
            try:
                values[key] = kind(val) if kind is not int else int(float(val))
            except ValueError:
                raise ParseError(f"line {lineno}: bad value for {key}: {val!r}") from None
        values.update(overrides)
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "SceneConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


# --------------------------------------------------------------------------
# Trajectories


def _path(cfg: SceneConfig, s: np.ndarray):
    """Positions and heading angles at arc lengths ``s``."""
    s = np.asarray(s, float)
    if cfg.trajectory == "straight":
        pos = np.stack([np.zeros_like(s), np.zeros_like(s), s], axis=-1)
        return pos, np.zeros_like(s)
    r = cfg.radius
    if cfg.trajectory == "circle":
        a = s / r
        pos = np.stack([r - r * np.cos(a), np.zeros_like(s), r * np.sin(a)], axis=-1)
        return pos, a
    # u-turn: leg along +z, half circle to the right, leg back along -z
    L = cfg.length
    arc = math.pi * r
    pos = np.zeros(s.shape + (3,))
    heading = np.zeros_like(s)
    leg1 = s <= L
    turn = (s > L) & (s <= L + arc)
    leg2 = s > L + arc
    pos[leg1, 2] = s[leg1]
    a = (s[turn] - L) / r
    pos[turn, 0] = r - r * np.cos(a)
    pos[turn, 2] = L + r * np.sin(a)
    heading[turn] = a
    d = s[leg2] - L - arc
    pos[leg2, 0] = 2 * r
    pos[leg2, 2] = L - d
    heading[leg2] = math.pi
    return pos, heading


def path_length(cfg: SceneConfig) -> float:
    if cfg.trajectory == "straight":
        return cfg.length
    if cfg.trajectory == "circle":
        return 2 * math.pi * cfg.radius
    return 2 * cfg.length + math.pi * cfg.radius


def ground_truth_poses(cfg: SceneConfig) -> list[Se3Pose]:
    """World-to-body poses along the configured path."""
    total = path_length(cfg)
    if cfg.trajectory == "circle":
        s = np.arange(cfg.n_frames) * total / cfg.n_frames  # loop does not repeat frame 0
    else:
        s = np.linspace(0.0, total, cfg.n_frames)
    pos, heading = _path(cfg, s)
    yaw = math.radians(cfg.mount_yaw_deg)
    poses = []
    for c, psi in zip(pos, heading):
        R_wb = rot_y(psi + yaw)  # body z along heading (+ mount yaw), body y = world y
        R_bw = R_wb.T
        poses.append(Se3Pose(R_bw, -R_bw @ c))
    return poses


# --------------------------------------------------------------------------
# Scenes


@dataclass(frozen=True)
class FrameObservations:
    point_ids: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    bearings: np.ndarray
    outlier: np.ndarray

    def __len__(self):
        return len(self.point_ids)

    def cubemap_observations(self, pose_id: int, sigma: float = 1.0) -> list[CubemapObservation]:
        return [CubemapObservation(int(p), pose_id, FacePoint(Face(int(f)), u, v), sigma)
                for p, f, (u, v) in zip(self.point_ids, self.faces, self.uv)]


@dataclass(frozen=True)
class SyntheticScene:
    config: SceneConfig
    camera: CubemapCamera
    poses: tuple  # ground-truth T_BW per frame
    points: np.ndarray
    frames: tuple  # FrameObservations per frame
    timestamps: np.ndarray

    @property
    def ground_truth(self) -> Trajectory:
        return Trajectory.from_world_to_body(self.timestamps, self.poses)

    def correspondences(self, k1: int, k2: int):
        """Common observations of two frames: ``(CorrespondenceArrays, point_ids, outlier)``."""
        a, b = self.frames[k1], self.frames[k2]
        ids, ia, ib = np.intersect1d(a.point_ids, b.point_ids, return_indices=True)
        data = CorrespondenceArrays(a.bearings[ia], b.bearings[ib], a.faces[ia], a.uv[ia],
                                    b.faces[ib], b.uv[ib])
        return data, ids, a.outlier[ia] | b.outlier[ib]


def visible_mask(cam: CubemapCamera, pose: Se3Pose, points: np.ndarray, cfg: SceneConfig):
    P = pose.act(points)
    dist = np.linalg.norm(P, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        polar = np.arccos(np.clip(P[:, 2] / dist, -1.0, 1.0))
    faces, _ = project_points(cam, P)
    return ((faces >= 0) & (dist >= cfg.min_range) & (dist <= cfg.max_range)
            & (polar <= math.radians(cfg.fov_deg) / 2.0))


def _sample_points(cfg: SceneConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    total = path_length(cfg)
    if cfg.distribution == "corridor":
        s = rng.uniform(-0.2 * total, 1.2 * total, n)
        if cfg.trajectory == "circle":
            s = rng.uniform(0.0, total, n)
        pos, heading = _path(cfg, np.clip(s, 0.0, total))
        fwd = np.stack([np.sin(heading), np.zeros(n), np.cos(heading)], axis=1)
        pos = pos + fwd * (s - np.clip(s, 0.0, total))[:, None]
        lateral = np.stack([np.cos(heading), np.zeros(n), -np.sin(heading)], axis=1)
        side = rng.choice([-1.0, 1.0], n)
        offset = side * (cfg.corridor_width / 2.0) * (1.0 + 0.3 * rng.random(n))
        y = rng.uniform(-cfg.corridor_height / 2.0, cfg.corridor_height / 2.0, n)
        return pos + lateral * offset[:, None] + np.array([0.0, 1.0, 0.0]) * y[:, None]
    pos, _ = _path(cfg, np.linspace(0.0, total, 200))
    lo = pos.min(0) - cfg.box_margin
    hi = pos.max(0) + cfg.box_margin
    lo[1], hi[1] = -cfg.box_height / 2.0, cfg.box_height / 2.0
    return rng.uniform(lo, hi, (n, 3))


def random_active_directions(cam: CubemapCamera, rng: np.random.Generator, n: int,
                             fov_deg: float = 190.0) -> np.ndarray:
    """Uniform directions restricted to active faces and the fisheye FoV."""
    out = np.zeros((0, 3))
    cos_max = math.cos(math.radians(fov_deg) / 2.0)
    while len(out) < n:
        d = normalize(rng.normal(size=(2 * n + 8, 3)))
        ok = (faces_of(d, cam.active_faces) >= 0) & (d[:, 2] >= cos_max)
        out = np.concatenate([out, d[ok]])
    return out[:n]


def _observe(cam, pose, points, ids, sigma, outlier_fraction, fov_deg, rng):
    P = pose.act(points[ids])
    faces, uv = project_points(cam, P)
    if sigma > 0:
        uv = uv + rng.normal(0.0, sigma, uv.shape)
        bearings = unproject_points(cam, faces, uv)
        faces, uv = project_points(cam, bearings)  # noise may cross a seam
    outlier = rng.random(len(ids)) < outlier_fraction
    if outlier.any():
        d = random_active_directions(cam, rng, int(outlier.sum()), fov_deg)
        f2, uv2 = project_points(cam, d)
        faces[outlier], uv[outlier] = f2, uv2
    keep = faces >= 0
    ids, faces, uv, outlier = np.asarray(ids, int)[keep], faces[keep], uv[keep], outlier[keep]
    bearings = unproject_points(cam, faces, uv)
    return FrameObservations(ids, faces, uv, bearings, outlier)


def gen_scene(cfg: SceneConfig) -> SyntheticScene:
    """Deterministic scene for ``cfg``; every point is visible in >= 2 frames."""
    rng = np.random.default_rng(cfg.seed)
    cam = CubemapCamera(cfg.face_size)
    poses = ground_truth_poses(cfg)
    points = _sample_points(cfg, rng, cfg.n_points)
    for _ in range(100):
        vis = np.array([visible_mask(cam, T, points, cfg) for T in poses])
        bad = vis.sum(0) < 2
        if not bad.any():
            break
        points[bad] = _sample_points(cfg, rng, int(bad.sum()))
    else:
        raise ConfigurationError("could not place points visible from two frames in 100 rounds")
    frames = []
    for T, v in zip(poses, vis):
        ids = np.flatnonzero(v)
        frames.append(_observe(cam, T, points, ids, cfg.sigma, cfg.outlier_fraction,
                               cfg.fov_deg, rng))
    points.setflags(write=False)
    stamps = np.arange(cfg.n_frames) * cfg.frame_dt
    return SyntheticScene(cfg, cam, tuple(poses), points, tuple(frames), stamps)


def gen_two_view(rng: np.random.Generator, n_points: int, outlier_fraction: float = 0.0,
                 sigma: float = 0.0, cam: CubemapCamera = CubemapCamera(),
                 max_angle_deg: float = 20.0, fov_deg: float = 190.0):
    """Random relative motion and points seen by both views.

    Returns ``(CorrespondenceArrays, R, t, outlier_labels)`` with
    ``X2 = R X1 + t`` and ``|t| = 1``.
    """
    R = random_rotation(rng, math.radians(max_angle_deg))
    t = normalize(rng.normal(size=3))
    T = Se3Pose(R, t)
    cos_max = math.cos(math.radians(fov_deg) / 2.0)
    pts = np.zeros((0, 3))
    while len(pts) < n_points:
        d = random_active_directions(cam, rng, n_points, fov_deg)
        X = d * rng.uniform(2.0, 10.0, (n_points, 1))
        X2 = T.act(X)
        b2 = normalize(X2)
        ok = (faces_of(b2, cam.active_faces) >= 0) & (b2[:, 2] >= cos_max)
        pts = np.concatenate([pts, X[ok]])
    pts = pts[:n_points]
    f1, uv1 = project_points(cam, pts)
    f2, uv2 = project_points(cam, T.act(pts))
    if sigma > 0:
        uv1 = uv1 + rng.normal(0.0, sigma, uv1.shape)
        uv2 = uv2 + rng.normal(0.0, sigma, uv2.shape)
        f1, uv1 = project_points(cam, unproject_points(cam, f1, uv1))
        f2, uv2 = project_points(cam, unproject_points(cam, f2, uv2))
    outlier = np.zeros(n_points, bool)
    n_out = int(round(outlier_fraction * n_points))
    if n_out:
        idx = rng.choice(n_points, n_out, replace=False)
        outlier[idx] = True
        f2[idx], uv2[idx] = project_points(cam, random_active_directions(cam, rng, n_out, fov_deg))
    data = CorrespondenceArrays(unproject_points(cam, f1, uv1), unproject_points(cam, f2, uv2),
                                f1, uv1, f2, uv2)
    return data, R, t, outlier


# --------------------------------------------------------------------------
# Visual odometry driver


@dataclass(frozen=True)
class PipelineConfig:
    metric: MetricKind = MetricKind.RU
    th: float = 1.0
    ransac_iterations: int = 2000
    init_parallax_deg: float = 1.0
    parallax_min_deg: float = DEFAULT_PARALLAX_MIN_DEG
    local_ba: bool = True
    ba_every: int = 5
    ba_window: int = 10
    ba_fixed: int = 2
    huber: float | None = HUBER_DEFAULT
    max_reproj_px: float = 4.0  # new-point acceptance
    new_point_parallax_deg: float = 3.0
    triangulation_span: int = 10  # frames searched back for a wide baseline
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "metric", MetricKind.parse(self.metric))


@dataclass
class VoResult:
    trajectory: Trajectory
    poses: list  # estimated T_BW per frame
    points: dict  # point id -> world position (estimated map frame)
    init_pair: tuple
    stats: list = field(default_factory=list)


class _Map:
    def __init__(self):
        self.points: dict[int, np.ndarray] = {}

    def arrays(self, ids):
        return np.array([self.points[i] for i in ids], float)


def _reprojection_ok(cam, pose, P, frame, idx, limit):
    res, z, _, _ = ru_terms(cam, pose.R, pose.t, P, frame.faces[idx], frame.uv[idx], False)
    return (z > 1e-9) & (np.linalg.norm(res, axis=1) <= limit)


def _triangulate_new(cam, mapdata, poses, frames, j, cfg: PipelineConfig):
    """Add unmapped points of frame ``j``, each paired with the oldest recent
    frame that saw it (widest baseline)."""
    b = frames[j]
    pending = np.array([p not in mapdata.points for p in b.point_ids], bool)
    partner = np.full(len(b), -1)
    for f in range(max(0, j - cfg.triangulation_span), j):
        if poses[f] is None:
            continue
        hit = pending & (partner < 0) & np.isin(b.point_ids, frames[f].point_ids)
        partner[hit] = f
    added = 0
    T2 = poses[j]
    for f in np.unique(partner[partner >= 0]):
        ib = np.flatnonzero(partner == f)
        a = frames[f]
        ids = b.point_ids[ib]
        ia = np.searchsorted(a.point_ids, ids)
        T1 = poses[f]
        T21 = T2 @ T1.inverse()
        X1, d1, d2, par, cross = midpoint_batch(a.bearings[ia], b.bearings[ib], T21.R, T21.t)
        ok = (cross >= 1e-12) & (d1 > 0) & (d2 > 0) & (par >= math.radians(cfg.new_point_parallax_deg))
        Xw = T1.inverse().act(X1)
        ok &= _reprojection_ok(cam, T1, Xw, a, ia, cfg.max_reproj_px)
        ok &= _reprojection_ok(cam, T2, Xw, b, ib, cfg.max_reproj_px)
        for pid, X in zip(ids[ok], Xw[ok]):
            mapdata.points[int(pid)] = X
        added += int(ok.sum())
    return added


def _frame_observations(frame: FrameObservations, pose_id: int, mapdata: _Map):
    known = np.array([p in mapdata.points for p in frame.point_ids], bool)
    idx = np.flatnonzero(known)
    obs = [CubemapObservation(int(frame.point_ids[i]), pose_id,
                              FacePoint(Face(int(frame.faces[i])), *frame.uv[i]))
           for i in idx]
    return obs


def _track(cam, mapdata, frame, pose_id, init, cfg: PipelineConfig):
    obs = _frame_observations(frame, pose_id, mapdata)
    res = optimize_pose(cam, init, mapdata.points, obs, metric=cfg.metric, huber=cfg.huber)
    return res


def _local_ba(cam, mapdata, poses, frames, window, n_fixed, huber):
    """Refine ``window`` poses and their points.

    Earlier frames that see the same points enter as fixed poses; only when
    fewer than ``n_fixed`` exist are the oldest window poses held instead.
    """
    local_ids = set()
    for k in window:
        local_ids.update(int(p) for p in frames[k].point_ids if p in mapdata.points)
    anchors = []
    for k in range(max(0, window[0] - len(window)), window[0]):
        if poses[k] is not None and local_ids.intersection(frames[k].point_ids.tolist()):
            anchors.append(k)
    fixed = list(anchors)
    for k in window:
        if len(fixed) >= n_fixed:
            break
        fixed.append(k)
    obs = []
    for k in anchors + list(window):
        obs.extend(o for o in _frame_observations(frames[k], k, mapdata) if o.point_id in local_ids)
    pose_map = {k: poses[k] for k in anchors + list(window)}
    pts_obs = _consistent_obs(cam, pose_map, mapdata.points, obs)
    if not pts_obs:
        return None
    pt_map = {pid: mapdata.points[pid] for pid in {o.point_id for o in pts_obs}}
    result = bundle_adjust(cam, pose_map, pt_map, pts_obs, fixed=set(fixed), huber=huber)
    for k in window:
        poses[k] = result.poses[k]
    mapdata.points.update(result.points)
    return result


def _consistent_obs(cam, pose_map, points, obs):
    """Observations predicted on their measured face, for points seen >= 2 times."""
    if not obs:
        return []
    R = np.array([pose_map[o.pose_id].R for o in obs])
    t = np.array([pose_map[o.pose_id].t for o in obs])
    X = np.array([points[o.point_id] for o in obs])
    P2 = np.einsum("nij,nj->ni", R, X) + t
    keep = faces_of(P2) == np.array([int(o.fp.face) for o in obs])
    kept = [o for o, k in zip(obs, keep) if k]
    counts: dict[int, int] = {}
    for o in kept:
        counts[o.point_id] = counts.get(o.point_id, 0) + 1
    return [o for o in kept if counts[o.point_id] >= 2]


def initialize(scene: SyntheticScene, cfg: PipelineConfig):
    """Pick the initialization pair ``(0, k)`` and its inlier structure.

    Returns ``(k, R, t, point_ids, points)`` with points in frame 0.
    """
    cam = scene.camera
    n = len(scene.frames)
    last_error = None
    for k in range(1, n):
        data, ids, _ = scene.correspondences(0, k)
        if len(data) < 8:
            continue
        rcfg = RansacConfig(max_iterations=cfg.ransac_iterations, th=cfg.th, seed=cfg.seed)
        try:
            model, mask, _ = ransac_essential(data, rcfg, cam)
            inl = data.subset(mask)
            R, t = decompose_essential(model, inl)
        except CubemapError as exc:
            last_error = exc
            continue
        X, d1, d2, par, cross = midpoint_batch(inl.r1, inl.r2, R, t)
        if np.median(par) < math.radians(cfg.init_parallax_deg):
            continue
        good = (cross >= 1e-12) & (d1 > 0) & (d2 > 0) & (par >= math.radians(cfg.parallax_min_deg))
        if good.sum() < 8:
            continue
        return k, R, t, ids[mask][good], X[good]
    detail = f" ({last_error})" if last_error else ""
    raise InitializationError(f"no initialization pair found for frames (0, 1..{n - 1}){detail}")


def run_vo(scene: SyntheticScene, cfg: PipelineConfig = PipelineConfig(), init=None) -> VoResult:
    """Two-view initialization, per-frame pose tracking, periodic local BA.

    ``init`` may carry a precomputed :func:`initialize` result for ``scene``.
    """
    cam = scene.camera
    frames = scene.frames
    n = len(frames)
    k, R, t, init_ids, init_X = init if init is not None else initialize(scene, cfg)
    poses: list = [None] * n
    poses[0] = Se3Pose.identity()
    poses[k] = Se3Pose(R, t)
    mapdata = _Map()
    for pid, X in zip(init_ids, init_X):
        mapdata.points[int(pid)] = X
    # joint refinement of the initial pair, scale held by the unit baseline
    obs = [o for j in (0, k) for o in _frame_observations(frames[j], j, mapdata)]
    obs = _consistent_obs(cam, {0: poses[0], k: poses[k]}, mapdata.points, obs)
    ba = bundle_adjust(cam, {0: poses[0], k: poses[k]},
                       {o.point_id: mapdata.points[o.point_id] for o in obs}, obs,
                       fixed={0}, scale_anchor=k, huber=cfg.huber)
    poses[0], poses[k] = ba.poses[0], ba.poses[k]
    mapdata.points.update(ba.points)
    stats = [dict(frame=0, n_obs=len(frames[0]), cost=0.0, iterations=0, map_size=len(mapdata.points))]
    for j in range(1, k):
        res = _track(cam, mapdata, frames[j], j, poses[j - 1], cfg)
        poses[j] = res.pose
        stats.append(dict(frame=j, n_obs=res.n_used, cost=res.cost, iterations=res.iterations,
                          map_size=len(mapdata.points)))
    stats.append(dict(frame=k, n_obs=len(obs), cost=float(ba.rms), iterations=ba.iterations,
                      map_size=len(mapdata.points)))
    for j in range(k + 1, n):
        prev, prev2 = poses[j - 1], poses[j - 2]
        guess = (prev @ prev2.inverse()) @ prev
        res = _track(cam, mapdata, frames[j], j, guess, cfg)
        poses[j] = res.pose
        _triangulate_new(cam, mapdata, poses, frames, j, cfg)
        if cfg.local_ba and j % cfg.ba_every == 0:
            window = list(range(max(0, j - cfg.ba_window + 1), j + 1))
            if len(window) > cfg.ba_fixed:
                _local_ba(cam, mapdata, poses, frames, window, cfg.ba_fixed, cfg.huber)
        stats.append(dict(frame=j, n_obs=res.n_used, cost=res.cost, iterations=res.iterations,
                          map_size=len(mapdata.points)))
    traj = Trajectory.from_world_to_body(scene.timestamps, poses)
    return VoResult(traj, poses, dict(mapdata.points), (0, k), stats)


# --------------------------------------------------------------------------
# Metric benchmark


@dataclass(frozen=True)
class BenchRecord:
    metric: str
    seed: int
    ate_rmse: float
    failed: bool


def bench_metrics(cfg: SceneConfig, metrics: Sequence = (MetricKind.RU, MetricKind.RT, MetricKind.RF),
                  seeds: Sequence[int] | None = None,
                  pipeline: PipelineConfig | None = None) -> list[BenchRecord]:
    """ATE per (metric, seed) with local BA disabled; identical scenes per seed."""
    if seeds is None:
        seeds = [cfg.seed]
    base = pipeline or PipelineConfig()
    limit = 10.0 * path_length(cfg)
    records = []
    for seed in seeds:
        scene = gen_scene(replace(cfg, seed=int(seed)))
        base_seeded = replace(base, local_ba=False, seed=int(seed))
        try:
            init = initialize(scene, base_seeded)
        except CubemapError:
            init = None
        for m in metrics:
            pc = replace(base_seeded, metric=MetricKind.parse(m))
            try:
                if init is None:
                    raise InitializationError("initialization failed")
                out = run_vo(scene, pc, init)
                ate = ate_rmse(out.trajectory, scene.ground_truth)
                sim_err = _max_position_error(out.trajectory, scene.ground_truth)
                failed = not math.isfinite(ate) or sim_err > limit
            except CubemapError:
                ate, failed = math.inf, True
            records.append(BenchRecord(MetricKind.parse(m).value, int(seed), float(ate), failed))
    return records


def _max_position_error(est: Trajectory, gt: Trajectory) -> float:
    sim = umeyama(est.positions, gt.positions, allow_collinear=True)
    err = gt.positions - sim.apply(est.positions)
    return float(np.max(np.linalg.norm(err, axis=1)))


# --------------------------------------------------------------------------
# Render-compare helpers


def checker_room(directions: np.ndarray, rotation: np.ndarray, half_size: float = 4.0,
                 square: float = 1.0) -> np.ndarray:
    """Intensity seen along ``directions`` from the centre of a checkered cube room."""
    d = np.asarray(directions, float) @ rotation.T
    ad = np.abs(d)
    axis = np.argmax(ad, axis=-1)
    hit = d * (half_size / np.take_along_axis(ad, axis[..., None], -1))
    a = np.where(axis == 0, hit[..., 1], hit[..., 0])
    b = np.where(axis == 2, hit[..., 1], hit[..., 2])
    parity = (np.floor(a / square) + np.floor(b / square) + axis) % 2
    return np.where(parity == 0, 50.0, 200.0)


def _supersample_offsets(n: int) -> np.ndarray:
    g = (np.arange(n) + 0.5) / n - 0.5
    gx, gy = np.meshgrid(g, g)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def render_fisheye(intr: FisheyeIntrinsics, rotation: np.ndarray, samples: int = 3,
                   chunk: int = 200_000) -> np.ndarray:
    w, h = intr.image_size
    v, u = np.mgrid[0:h, 0:w]
    pix = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
    acc = np.zeros(len(pix))
    for off in _supersample_offsets(samples):
        for s in range(0, len(pix), chunk):
            acc[s:s + chunk] += checker_room(lift_pixels(intr, pix[s:s + chunk] + off), rotation)
    img = acc / samples**2
    return np.clip(np.rint(img), 0, 255).astype(np.uint8).reshape(h, w)


def render_face(cam: CubemapCamera, face, rotation: np.ndarray, samples: int = 3) -> np.ndarray:
    S = cam.face_size
    v, u = np.mgrid[0:S, 0:S]
    uv = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
    acc = np.zeros(len(uv))
    faces = np.full(len(uv), int(face))
    for off in _supersample_offsets(samples):
        acc += checker_room(unproject_points(cam, faces, uv + off), rotation)
    img = acc / samples**2
    return np.clip(np.rint(img), 0, 255).astype(np.uint8).reshape(S, S)


def remap_render_difference(face_size: int = 650, fisheye_size: int = 1280,
                            fov_deg: float = 190.0, seed: int = 0) -> dict:
    """Mean absolute difference per face between remapped fisheye and direct renders."""
    rng = np.random.default_rng(seed)
    rotation = random_rotation(rng)
    radius = (fisheye_size / 2.0 - 4.0) * 90.0 / (fov_deg / 2.0)
    intr = equidistant_intrinsics(radius, (fisheye_size, fisheye_size), fov_deg=fov_deg)
    cam = CubemapCamera(face_size)
    fish = render_fisheye(intr, rotation)
    table = build_remap_table(intr, cam)
    faces = remap_image(table, fish)
    out = {}
    for face, img in faces.items():
        valid = table.valid(face)
        direct = render_face(cam, face, rotation)
        diff = np.abs(img.astype(float) - direct.astype(float))[valid]
        out[face] = (float(diff.mean()) if diff.size else 0.0, img.shape)
    return out
