"""Fisheye polynomial camera model and the cubemap (piecewise-pinhole) model.

Frames: the body frame ``B`` is the front virtual camera (x right, y down,
z forward). Every cube face is a 90 degree pinhole camera sharing the body
origin; ``FACE_ROTATIONS[face]`` maps body coordinates into that face's
camera frame.

Pixels are ``(u, v) = (column, row)`` with pixel centres on integer
coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Iterable

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import bernoulli

from .errors import (DegenerateError, DomainError, NoFaceError, NumericError,
                     OutOfFovError, ParseError, ValidationError)


class Face(IntEnum):
    # Value order doubles as tie-break priority in face_of.
    FRONT = 0
    LEFT = 1
    RIGHT = 2
    UP = 3
    DOWN = 4
    BACK = 5


FACE_AXES = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0],
])

# R_{C_i B}: Front = I, Left = Ry(+90), Right = Ry(-90), Up = Rx(-90),
# Down = Rx(+90), Back = Ry(180). Written out to keep the entries exact.
FACE_ROTATIONS = np.array([
    [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
    [[0, 0, 1], [0, 1, 0], [-1, 0, 0]],
    [[0, 0, -1], [0, 1, 0], [1, 0, 0]],
    [[1, 0, 0], [0, 0, 1], [0, -1, 0]],
    [[1, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[-1, 0, 0], [0, 1, 0], [0, 0, -1]],
], dtype=float)
FACE_ROTATIONS.setflags(write=False)

DEFAULT_ACTIVE_FACES = (Face.FRONT, Face.LEFT, Face.RIGHT, Face.UP, Face.DOWN)
ALL_FACES = tuple(Face)

_FACE_NAMES = {f.name.lower(): f for f in Face}


def parse_face(name: str | int | Face) -> Face:
    if isinstance(name, Face):
        return name
    if isinstance(name, (int, np.integer)):
        return Face(int(name))
    key = name.strip().lower()
    if key.isdigit() and int(key) < len(Face):
        return Face(int(key))
    try:
        return _FACE_NAMES[key]
    except KeyError:
        raise ValueError(f"unknown face {name!r}") from None


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Fisheye (OCamCalib-style polynomial) model


@dataclass(frozen=True)
class FisheyeIntrinsics:
    """Polynomial omnidirectional camera.

    ``center`` keeps the calibration file's ``(row, col)`` order;
    ``image_size`` is ``(width, height)``. ``fov_deg`` bounds the usable
    field of view; when ``None`` it is taken from the image corners.
    """

    cam2world: tuple[float, ...]
    center: tuple[float, float]
    image_size: tuple[int, int]
    world2cam: tuple[float, ...] = ()
    affine: tuple[float, float, float] = (1.0, 0.0, 0.0)
    fov_deg: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "cam2world", tuple(float(a) for a in self.cam2world))
        object.__setattr__(self, "world2cam", tuple(float(a) for a in self.world2cam))
        object.__setattr__(self, "center", tuple(float(a) for a in self.center))
        object.__setattr__(self, "affine", tuple(float(a) for a in self.affine))
        object.__setattr__(self, "image_size", tuple(int(a) for a in self.image_size))
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValidationError(f"image size must be positive, got {self.image_size}")
        row, col = self.center
        if not (0 < col < w - 1 and 0 < row < h - 1):
            raise ValidationError(f"center (row={row}, col={col}) not inside {w}x{h} image")
        if not self.cam2world or self.cam2world[0] == 0.0:
            raise ValidationError("cam2world polynomial must be non-empty with a0 != 0")
        c, d, e = self.affine
        if abs(c - d * e) <= 1e-12:
            raise ValidationError(f"affine matrix [[c, d], [e, 1]] is singular: {self.affine}")
        if self.fov_deg is not None and not 0 < self.fov_deg <= 360:
            raise ValidationError(f"fov_deg out of range: {self.fov_deg}")

    @property
    def cx(self) -> float:
        """Distortion centre column."""
        return self.center[1]

    @property
    def cy(self) -> float:
        """Distortion centre row."""
        return self.center[0]

    @property
    def z_sign(self) -> float:
        # a0 < 0 in OCamCalib files: the polynomial axis points backwards.
        return math.copysign(1.0, self.cam2world[0])

    @cached_property
    def half_fov(self) -> float:
        """Maximal polar angle (radians) of a usable bearing."""
        if self.fov_deg is not None:
            return math.radians(self.fov_deg) / 2.0
        w, h = self.image_size
        corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], float)
        z = lift_pixels(self, corners)[:, 2]
        return float(np.arccos(np.clip(z, -1.0, 1.0)).max())

    @cached_property
    def _dpoly(self) -> np.ndarray:
        return npoly.polyder(np.asarray(self.cam2world))


def lift_pixels(intr: FisheyeIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Vectorized pixel -> unit bearing, no bounds checking."""
    pixels = np.asarray(pixels, dtype=float)
    drow = pixels[..., 1] - intr.cy
    dcol = pixels[..., 0] - intr.cx
    c, d, e = intr.affine
    inv_det = 1.0 / (c - d * e)
    xp = inv_det * (drow - d * dcol)  # row direction
    yp = inv_det * (-e * drow + c * dcol)  # column direction
    rho = np.hypot(xp, yp)
    z = intr.z_sign * npoly.polyval(rho, intr.cam2world)
    return normalize(np.stack([yp, xp, z], axis=-1))


def cam_to_bearing(intr: FisheyeIntrinsics, pixel) -> np.ndarray:
    """Lift an image pixel ``(u, v)`` (or an ``(N, 2)`` array) to unit bearings."""
    pixel = np.asarray(pixel, dtype=float)
    w, h = intr.image_size
    u, v = pixel[..., 0], pixel[..., 1]
    if np.any((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)) or not np.all(np.isfinite(pixel)):
        raise DomainError(f"pixel outside {w}x{h} image")
    return lift_pixels(intr, pixel)


def _solve_radius(intr: FisheyeIntrinsics, theta: np.ndarray,
                  max_iter: int = 50, tol: float = 1e-10):
    """Newton solve of ``g(rho) sin(theta) = rho cos(theta)`` with ``g = z_sign * f``.

    Returns ``(rho, converged)``.
    """
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    a = np.asarray(intr.cam2world)
    da = intr._dpoly
    s = intr.z_sign
    if intr.world2cam:
        # inverse polynomial uses the source convention: angle from the image plane
        theta_src = np.arctan2(s * cos_t, sin_t)
        rho = npoly.polyval(theta_src, np.asarray(intr.world2cam))
    else:
        rho = abs(a[0]) * theta
    rho = np.maximum(rho, 0.0)
    converged = np.zeros(theta.shape, dtype=bool)
    for _ in range(max_iter):
        h = s * npoly.polyval(rho, a) * sin_t - rho * cos_t
        dh = s * npoly.polyval(rho, da) * sin_t - cos_t
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(dh != 0.0, h / dh, np.inf)
        step = np.where(converged, 0.0, step)
        rho = rho - step
        converged |= np.abs(step) < tol
        if converged.all():
            break
    converged &= np.isfinite(rho) & (rho >= -tol)
    return np.maximum(rho, 0.0), converged


def project_bearings(intr: FisheyeIntrinsics, bearings: np.ndarray):
    """Vectorized bearing -> pixel.

    Returns ``(pixels, valid)``; invalid entries (outside the FoV, outside the
    image, or Newton failure) hold NaN.
    """
    b = normalize(np.atleast_2d(bearings))
    x, y, z = b[:, 0], b[:, 1], b[:, 2]
    sin_t = np.hypot(x, y)
    theta = np.arctan2(sin_t, z)  # arccos(z) loses angles below ~1e-8
    in_fov = theta <= intr.half_fov + 1e-12
    rho, ok = _solve_radius(intr, theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(sin_t > 0, rho / sin_t, 0.0)
    yp = x * scale  # column direction
    xp = y * scale  # row direction
    c, d, e = intr.affine
    row = c * xp + d * yp + intr.cy
    col = e * xp + yp + intr.cx
    w, h = intr.image_size
    inside = (col >= 0) & (col <= w - 1) & (row >= 0) & (row <= h - 1)
    valid = in_fov & ok & inside
    pix = np.stack([col, row], axis=1)
    pix[~valid] = np.nan
    return pix, valid


def bearing_to_pixel(intr: FisheyeIntrinsics, b) -> np.ndarray:
    """Project a single bearing into the fisheye image, raising on failure."""
    b = normalize(np.asarray(b, dtype=float).reshape(3))
    theta = math.acos(min(1.0, max(-1.0, b[2])))
    if theta > intr.half_fov + 1e-12:
        raise OutOfFovError(
            f"polar angle {math.degrees(theta):.3f} deg exceeds half FoV "
            f"{math.degrees(intr.half_fov):.3f} deg")
    _, ok = _solve_radius(intr, np.array([theta]))
    if not ok[0]:
        raise NumericError("Newton inversion of the fisheye polynomial did not converge")
    pix, valid = project_bearings(intr, b)
    if not valid[0]:
        raise OutOfFovError("bearing projects outside the image")
    return pix[0]


def equidistant_intrinsics(radius: float, image_size: tuple[int, int],
                           fov_deg: float = 190.0, center=None,
                           terms: int = 10) -> FisheyeIntrinsics:
    """Near-equidistant polynomial model: 90 degrees lands at ``radius`` pixels.

    The polynomial is the truncated series of ``(2R/pi) x cot x`` with
    ``x = pi rho / (2R)`` plus one correction term so that it vanishes exactly
    at ``rho = R``. ``a0 = -2R/pi`` and ``a1 = 0`` as in OCamCalib files.
    """
    w, h = image_size
    if center is None:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    k = np.arange(terms + 1)
    B = bernoulli(2 * terms)[2 * k]
    series = (-1.0) ** k * 2.0 ** (2 * k) * B / np.array([math.factorial(2 * i) for i in k])
    coeffs = np.zeros(2 * terms + 3)
    alpha = math.pi / (2.0 * radius)
    coeffs[2 * k] = -(2.0 * radius / math.pi) * series * alpha ** (2 * k)
    at_r = npoly.polyval(radius, coeffs)
    coeffs[2 * terms + 2] -= at_r / radius ** (2 * terms + 2)
    return FisheyeIntrinsics(cam2world=tuple(coeffs), center=center,
                             image_size=(w, h), fov_deg=fov_deg)


# --------------------------------------------------------------------------
# OCamCalib text format

_SECTIONS = ("polynomial", "inverse polynomial", "center", "affine", "image size")


def _section_hint(comment: str) -> str | None:
    c = comment.lower()
    if "inverse" in c or "world2cam" in c or "invpol" in c:
        return "inverse polynomial"
    if "polynomial" in c or "direct" in c or "cam2world" in c:
        return "polynomial"
    if "center" in c or "centre" in c:
        return "center"
    if "affine" in c:
        return "affine"
    if "size" in c:
        return "image size"
    return None


def load_ocamcalib(text: str, fov_deg: float | None = None) -> FisheyeIntrinsics:
    """Parse OCamCalib ``calib_results.txt`` content.

    Data lines are assigned to sections by the preceding comment when it
    names one, otherwise positionally.
    """
    found: dict[str, list[float]] = {}
    hint = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            hint = _section_hint(line) or hint
            continue
        if hint is None or hint in found:
            hint = next((s for s in _SECTIONS if s not in found), None)
            if hint is None:
                raise ParseError(f"line {lineno}: unexpected extra data")
        try:
            found[hint] = [float(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(f"{hint}: non-numeric value on line {lineno}") from None
        hint = None

    def poly(name):
        vals = found[name]
        if not vals or vals[0] != int(vals[0]) or len(vals) - 1 != int(vals[0]):
            raise ParseError(f"{name}: count does not match number of coefficients")
        return tuple(vals[1:])

    for name in ("polynomial", "center", "affine", "image size"):
        if name not in found:
            raise ParseError(f"missing section: {name}")
    cam2world = poly("polynomial")
    if not cam2world:
        raise ParseError("polynomial: no coefficients")
    world2cam = poly("inverse polynomial") if "inverse polynomial" in found else ()
    for name, n in (("center", 2), ("affine", 3), ("image size", 2)):
        if len(found[name]) != n:
            raise ParseError(f"{name}: expected {n} values, got {len(found[name])}")
    height, width = found["image size"]
    if height != int(height) or width != int(width):
        raise ParseError("image size: expected integers")
    return FisheyeIntrinsics(cam2world=cam2world, world2cam=world2cam,
                             center=tuple(found["center"]),
                             affine=tuple(found["affine"]),
                             image_size=(int(width), int(height)),
                             fov_deg=fov_deg)


def dump_ocamcalib(intr: FisheyeIntrinsics) -> str:
    def fmt(vals):
        return " ".join(repr(float(v)) for v in vals)

    w, h = intr.image_size
    return "\n".join([
        "#polynomial coefficients for the DIRECT mapping function (cam2world)",
        "",
        f"{len(intr.cam2world)} {fmt(intr.cam2world)}",
        "",
        "#polynomial coefficients for the inverse mapping function (world2cam)",
        "",
        f"{len(intr.world2cam)} {fmt(intr.world2cam)}".rstrip(),
        "",
        '#center: "row" and "column", starting from 0 (C convention)',
        "",
        fmt(intr.center),
        "",
        '#affine parameters "c", "d", "e"',
        "",
        fmt(intr.affine),
        "",
        '#image size: "height" and "width"',
        "",
        f"{h} {w}",
        "",
    ])


def read_ocamcalib(path, fov_deg: float | None = None) -> FisheyeIntrinsics:
    with open(path, encoding="utf-8") as fh:
        return load_ocamcalib(fh.read(), fov_deg=fov_deg)


# --------------------------------------------------------------------------
# Cubemap model


@dataclass(frozen=True)
class FacePoint:
    face: Face
    u: float
    v: float

    def __post_init__(self):
        object.__setattr__(self, "face", parse_face(self.face))
        object.__setattr__(self, "u", float(self.u))
        object.__setattr__(self, "v", float(self.v))

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True)
class CubemapCamera:
    """Square 90 degree virtual pinhole faces sharing one centre.

    ``f = S/2`` and the principal point is ``((S-1)/2, (S-1)/2)``, so a face
    covers pixel coordinates ``[-0.5, S-0.5]``.
    """

    face_size: int = 650
    active_faces: tuple[Face, ...] = DEFAULT_ACTIVE_FACES
    _active_mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.face_size) != self.face_size or self.face_size <= 0:
            raise ValidationError(f"face size must be a positive integer, got {self.face_size}")
        faces = tuple(sorted({parse_face(f) for f in self.active_faces}))
        if not faces:
            raise ValidationError("at least one face must be active")
        object.__setattr__(self, "face_size", int(self.face_size))
        object.__setattr__(self, "active_faces", faces)
        mask = np.zeros(6, dtype=bool)
        mask[list(faces)] = True
        mask.setflags(write=False)
        object.__setattr__(self, "_active_mask", mask)

    @property
    def focal(self) -> float:
        return self.face_size / 2.0

    @property
    def principal_point(self) -> tuple[float, float]:
        c = (self.face_size - 1) / 2.0
        return c, c

    @property
    def K(self) -> np.ndarray:
        c = (self.face_size - 1) / 2.0
        return np.array([[self.focal, 0.0, c], [0.0, self.focal, c], [0.0, 0.0, 1.0]])

    def rotation(self, face) -> np.ndarray:
        return FACE_ROTATIONS[int(face)]

    def is_active(self, face) -> bool:
        return bool(self._active_mask[int(face)])

    def in_bounds(self, uv: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        lo, hi = -0.5 - tol, self.face_size - 0.5 + tol
        return np.all((uv >= lo) & (uv <= hi), axis=-1)


def faces_of(bearings: np.ndarray, active_faces: Iterable = DEFAULT_ACTIVE_FACES) -> np.ndarray:
    """Face index per direction, ``-1`` where the winning face is inactive."""
    b = np.atleast_2d(np.asarray(bearings, dtype=float))
    dots = b @ FACE_AXES.T
    # argmax returns the first maximum, which is the priority order
    best = np.argmax(dots, axis=1)
    mask = np.zeros(6, dtype=bool)
    mask[[int(f) for f in active_faces]] = True
    return np.where(mask[best], best, -1)


def face_of(b, active_faces: Iterable = DEFAULT_ACTIVE_FACES) -> Face:
    idx = faces_of(np.asarray(b, dtype=float).reshape(1, 3), active_faces)[0]
    if idx < 0:
        raise NoFaceError(f"direction {np.asarray(b).tolist()} falls on an inactive face")
    return Face(int(idx))


def project_points(cam: CubemapCamera, points: np.ndarray):
    """Vectorized body-frame points -> ``(faces, uv)``; face ``-1`` and NaN uv when invalid."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    faces = faces_of(P, cam.active_faces)
    P1 = np.einsum("nij,nj->ni", FACE_ROTATIONS[np.maximum(faces, 0)], P)
    z = P1[:, 2]
    ok = (faces >= 0) & (z > 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = cam.focal * P1[:, :2] / z[:, None] + (cam.face_size - 1) / 2.0
    faces = np.where(ok, faces, -1)
    uv[~ok] = np.nan
    return faces, uv


def project_cubemap(cam: CubemapCamera, P_body) -> FacePoint:
    P = np.asarray(P_body, dtype=float).reshape(3)
    norm = np.linalg.norm(P)
    if norm == 0.0:
        raise DegenerateError("cannot project the zero vector")
    face = face_of(P / norm, cam.active_faces)
    P1 = FACE_ROTATIONS[face] @ P
    if P1[2] <= 1e-12:
        raise DegenerateError("point has no positive depth on its face")
    c = (cam.face_size - 1) / 2.0
    return FacePoint(face, cam.focal * P1[0] / P1[2] + c, cam.focal * P1[1] / P1[2] + c)


def unproject_points(cam: CubemapCamera, faces: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Vectorized face pixels -> body-frame unit bearings."""
    faces = np.asarray(faces, dtype=int)
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    c = (cam.face_size - 1) / 2.0
    ray = np.concatenate([(uv - c) / cam.focal, np.ones((len(uv), 1))], axis=1)
    body = np.einsum("nji,nj->ni", FACE_ROTATIONS[faces], ray)
    return normalize(body)


def unproject_cubemap(cam: CubemapCamera, fp: FacePoint) -> np.ndarray:
    if not cam.is_active(fp.face):
        raise NoFaceError(f"face {fp.face.name} is not active")
    return unproject_points(cam, np.array([int(fp.face)]), fp.uv[None])[0]
