"""Fisheye -> cubemap resampling and binary PGM I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import (CubemapCamera, Face, FisheyeIntrinsics, project_bearings,
                    unproject_points)
from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class RemapTable:
    """Per-face ``(S, S, 2)`` grids of fisheye source coordinates ``(x, y)``.

    ``maps[face][v, u]`` is the source pixel for face pixel ``(u, v)``;
    NaN marks out-of-FoV entries.
    """

    intrinsics: FisheyeIntrinsics
    camera: CubemapCamera
    maps: dict

    def valid(self, face) -> np.ndarray:
        return ~np.isnan(self.maps[Face(face)][..., 0])


def face_pixel_grid(size: int) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size].astype(float)
    return np.stack([u, v], axis=-1)


def build_remap_table(intr: FisheyeIntrinsics, cam: CubemapCamera) -> RemapTable:
    S = cam.face_size
    uv = face_pixel_grid(S).reshape(-1, 2)
    maps = {}
    for face in cam.active_faces:
        bearings = unproject_points(cam, np.full(len(uv), int(face)), uv)
        pix, _ = project_bearings(intr, bearings)
        grid = pix.reshape(S, S, 2)
        grid.setflags(write=False)
        maps[face] = grid
    return RemapTable(intr, cam, maps)


def bilinear_sample(img: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup with border clamping; NaN coordinates give NaN."""
    h, w = img.shape
    x = np.clip(xy[..., 0], 0.0, w - 1.0)
    y = np.clip(xy[..., 1], 0.0, h - 1.0)
    bad = np.isnan(x) | np.isnan(y)
    x = np.where(bad, 0.0, x)
    y = np.where(bad, 0.0, y)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros_like(x, int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros_like(y, int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    src = img.astype(float)
    out = ((1 - fx) * (1 - fy) * src[y0, x0] + fx * (1 - fy) * src[y0, x1]
           + (1 - fx) * fy * src[y1, x0] + fx * fy * src[y1, x1])
    return np.where(bad, np.nan, out)


def remap_image(table: RemapTable, src: np.ndarray) -> dict:
    """Resample an 8-bit fisheye image into one ``S x S`` image per active face."""
    src = np.asarray(src)
    w, h = table.intrinsics.image_size
    if src.ndim != 2 or src.shape != (h, w):
        raise ValidationError(f"source image shape {src.shape} does not match {w}x{h}")
    faces = {}
    for face, grid in table.maps.items():
        vals = bilinear_sample(src, grid)
        faces[face] = np.where(np.isnan(vals), 0, np.clip(np.rint(vals), 0, 255)).astype(np.uint8)
    return faces


# Cross layout cells (row, col) in units of S; Back sits right of Right when active.
CROSS_LAYOUT = {
    Face.UP: (0, 1),
    Face.LEFT: (1, 0),
    Face.FRONT: (1, 1),
    Face.RIGHT: (1, 2),
    Face.DOWN: (2, 1),
    Face.BACK: (1, 3),
}


def compose_cross(faces: dict, face_size: int) -> np.ndarray:
    cols = 4 if Face.BACK in faces else 3
    out = np.zeros((3 * face_size, cols * face_size), dtype=np.uint8)
    for face, img in faces.items():
        r, c = CROSS_LAYOUT[Face(face)]
        out[r * face_size:(r + 1) * face_size, c * face_size:(c + 1) * face_size] = img
    return out


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValidationError("PGM images must be 2-D")
    data = np.clip(img, 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _pgm_tokens(buf: bytes, count: int):
    """Read ``count`` header tokens, skipping comments; returns (tokens, offset)."""
    tokens, i, n = [], 0, len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ParseError("truncated PGM header")
        tokens.append(buf[start:i])
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(buf, 4)
    if magic != b"P5":
        raise ParseError(f"not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}")
    if len(buf) - offset < w * h:
        raise ParseError("PGM payload shorter than width*height")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset)
    return data.reshape(h, w).copy()
