"""Trajectory containers, similarity alignment, ATE RMSE and TUM-format I/O."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InsufficientDataError, NumericError, ParseError, ValidationError
from .lie import Se3Pose

ASSOCIATION_WINDOW = 0.02  # seconds


@dataclass(frozen=True)
class Trajectory:
    """Timestamped camera-to-world poses with strictly increasing stamps."""

    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) == 0:
            raise ValidationError("trajectory needs at least one pose")
        if len(ts) != len(poses):
            raise ValidationError("timestamp and pose counts differ")
        if np.any(np.diff(ts) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    @classmethod
    def from_world_to_body(cls, timestamps, poses_bw: Sequence[Se3Pose]) -> "Trajectory":
        return cls(timestamps, tuple(p.inverse() for p in poses_bw))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])

    def transformed(self, sim: "Sim3Transform") -> "Trajectory":
        """Apply ``x -> s R x + t`` to every pose (rotation and scaled position)."""
        out = []
        for p in self.poses:
            out.append(Se3Pose(sim.R @ p.R, sim.apply(p.t)))
        return Trajectory(self.timestamps, tuple(out))


@dataclass(frozen=True)
class Sim3Transform:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0:
            raise ValidationError("similarity scale must be positive")
        R = np.array(self.R, float)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValidationError("similarity rotation is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.array(self.t, float).reshape(3))

    @classmethod
    def identity(cls) -> "Sim3Transform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.s * (np.asarray(x, float) @ self.R.T) + self.t

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def __matmul__(self, other: "Sim3Transform") -> "Sim3Transform":
        return Sim3Transform(self.s * other.s, self.R @ other.R,
                             self.s * self.R @ other.t + self.t)

    def inverse(self) -> "Sim3Transform":
        Rt = self.R.T
        return Sim3Transform(1.0 / self.s, Rt, -(Rt @ self.t) / self.s)


def associate(a: np.ndarray, b: np.ndarray, window: float = ASSOCIATION_WINDOW):
    """Greedy nearest-timestamp matching; each stamp used at most once.

    Candidate pairs within ``window`` are taken in order of increasing time
    difference (ties by index), which makes exact-stamp matching symmetric.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if len(a) == 0 or len(b) == 0:
        return []
    j_sorted = np.argsort(b, kind="stable")
    bs = b[j_sorted]
    cands = []
    for i, ta in enumerate(a):
        lo = np.searchsorted(bs, ta - window, side="left")
        hi = np.searchsorted(bs, ta + window, side="right")
        for k in range(lo, hi):
            cands.append((abs(bs[k] - ta), i, int(j_sorted[k])))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    pairs.sort()
    return pairs


def umeyama(src: np.ndarray, dst: np.ndarray, allow_collinear: bool = False) -> Sim3Transform:
    """Least-squares similarity with ``dst ~ s R src + t``.

    Collinear input leaves the rotation about the line free; with
    ``allow_collinear`` one minimizer is returned instead of raising.
    """
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    n = len(src)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.sum(xs * xs) / n
    if var_s < 1e-300:
        raise NumericError("source positions have zero variance")
    cov = xd.T @ xs / n
    U, d, Vt = np.linalg.svd(cov)
    if not allow_collinear and d[1] < 1e-12 * max(d[0], 1e-300):
        raise NumericError("positions are collinear; rotation is not determined")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(d) @ D) / var_s)
    t = mu_d - s * R @ mu_s
    return Sim3Transform(s, R, t)


def _matched_positions(est: Trajectory, gt: Trajectory):
    pairs = associate(est.timestamps, gt.timestamps)
    if len(pairs) < 3:
        raise InsufficientDataError(f"need >= 3 associated poses, found {len(pairs)}")
    ie, ig = np.array(pairs).T
    return est.positions[ie], gt.positions[ig]


def align_sim3(est: Trajectory, gt: Trajectory) -> Sim3Transform:
    """Similarity mapping estimated positions onto ground truth."""
    pe, pg = _matched_positions(est, gt)
    return umeyama(pe, pg)


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    """Position RMSE after similarity alignment.

    Straight tracks are accepted: every optimal alignment of collinear
    positions leaves the same residual.
    """
    pe, pg = _matched_positions(est, gt)
    sim = umeyama(pe, pg, allow_collinear=True)
    err = pg - sim.apply(pe)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


# --------------------------------------------------------------------------
# TUM text format: "timestamp tx ty tz qx qy qz qw"


def parse_trajectory(text: str) -> Trajectory:
    stamps, poses = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise ParseError(f"line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(f"line {lineno}: non-finite value")
        q = np.array(vals[4:])
        qn = np.linalg.norm(q)
        if abs(qn - 1.0) > 1e-3:
            raise ParseError(f"line {lineno}: quaternion norm {qn:.6g} is not 1")
        R = Rotation.from_quat(q / qn).as_matrix()
        stamps.append(vals[0])
        poses.append(Se3Pose(R, np.array(vals[1:4])))
    if not stamps:
        raise ParseError("trajectory file has no poses")
    return Trajectory(np.array(stamps), tuple(poses))


def format_trajectory(traj: Trajectory) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, p in zip(traj.timestamps, traj.poses):
        q = Rotation.from_matrix(p.R).as_quat()
        if q[3] < 0:
            q = -q
        vals = [ts, *p.t, *q]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def read_trajectory(path: str | os.PathLike) -> Trajectory:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trajectory(fh.read())


def write_trajectory(path: str | os.PathLike, traj: Trajectory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_trajectory(traj))
