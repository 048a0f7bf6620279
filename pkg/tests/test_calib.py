import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from cubemap_vo.calib import (
    CubemapCamera,
    Face,
    FacePoint,
    FisheyeIntrinsics,
    bearing_to_pixel,
    cam_to_bearing,
    dump_ocamcalib,
    equidistant_intrinsics,
    face_of,
    lift_pixels,
    load_ocamcalib,
    parse_face,
    project_bearings,
    project_cubemap,
    project_points,
    read_ocamcalib,
    unproject_cubemap,
    unproject_points,
)
from cubemap_vo.errors import (
    DegenerateError,
    DomainError,
    NoFaceError,
    OutOfFovError,
    ParseError,
    ValidationError,
)

MINIMAL = """#polynomial coefficients for the DIRECT mapping function
1 -160

#center: "row" and "column"
360 640

#affine parameters "c", "d", "e"
1 0 0

#image size: "height" and "width"
720 1280
"""

R_EQUI = 600.0


@pytest.fixture(scope="module")
def equi():
    return equidistant_intrinsics(R_EQUI, (1280, 1280), fov_deg=190.0)


class TestOcamcalibFile:
    def test_minimal_file_fields(self):
        intr = load_ocamcalib(MINIMAL)
        assert intr.cam2world == (-160.0,)
        assert intr.center == (360.0, 640.0)
        assert intr.affine == (1.0, 0.0, 0.0)
        assert intr.image_size == (1280, 720)
        assert intr.world2cam == ()

    def test_missing_polynomial_names_section(self):
        with pytest.raises(ParseError, match="polynomial"):
            load_ocamcalib("#center\n360 640\n#affine\n1 0 0\n#image size\n720 1280\n")

    def test_bad_count_is_reported(self):
        with pytest.raises(ParseError, match="polynomial"):
            load_ocamcalib(MINIMAL.replace("1 -160", "3 -160 0"))

    def test_round_trip(self, tmp_path, equi):
        intr = FisheyeIntrinsics(cam2world=equi.cam2world, world2cam=(410.0, 300.0, 12.5),
                                 center=(639.25, 640.75), affine=(1.0002, 0.0003, -0.0001),
                                 image_size=(1280, 1280))
        path = tmp_path / "calib.txt"
        path.write_text(dump_ocamcalib(intr))
        back = read_ocamcalib(path)
        assert back == intr

    def test_singular_affine_rejected(self):
        with pytest.raises(ValidationError):
            load_ocamcalib(MINIMAL.replace("1 0 0", "1 1 1"))


class TestFisheyeProjection:
    def test_center_lifts_to_optical_axis(self):
        intr = load_ocamcalib(MINIMAL)
        np.testing.assert_allclose(cam_to_bearing(intr, (640.0, 360.0)), [0.0, 0.0, 1.0], atol=1e-15)

    def test_equidistant_ninety_degrees(self, equi):
        c = 639.5
        np.testing.assert_allclose(cam_to_bearing(equi, (c + R_EQUI, c)), [1.0, 0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(bearing_to_pixel(equi, [1.0, 0.0, 0.0]), [c + R_EQUI, c], atol=1e-9)

    def test_axis_projects_to_center(self, equi):
        np.testing.assert_allclose(bearing_to_pixel(equi, [0.0, 0.0, 1.0]), [639.5, 639.5], atol=1e-12)

    def test_pixel_outside_image(self, equi):
        with pytest.raises(DomainError):
            cam_to_bearing(equi, (-1.0, 10.0))

    def test_out_of_fov(self, equi):
        beyond = math.radians(96.0)
        with pytest.raises(OutOfFovError):
            bearing_to_pixel(equi, [math.sin(beyond), 0.0, math.cos(beyond)])

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, math.radians(94.0)), st.floats(-math.pi, math.pi))
    @example(1e-8, 0.0)
    def test_bearing_pixel_round_trip(self, theta, azimuth):
        intr = equidistant_intrinsics(R_EQUI, (1280, 1280), fov_deg=190.0)
        b = np.array([math.sin(theta) * math.cos(azimuth), math.sin(theta) * math.sin(azimuth),
                      math.cos(theta)])
        back = cam_to_bearing(intr, bearing_to_pixel(intr, b))
        np.testing.assert_allclose(back, b, atol=1e-9)

    def test_affine_round_trip(self):
        base = equidistant_intrinsics(R_EQUI, (1280, 1280))
        intr = FisheyeIntrinsics(cam2world=base.cam2world, center=(630.0, 650.0),
                                 affine=(1.01, 0.02, -0.015), image_size=(1280, 1280),
                                 fov_deg=190.0)
        rng = np.random.default_rng(3)
        pix = rng.uniform(200, 1080, (500, 2))
        b = lift_pixels(intr, pix)
        back, ok = project_bearings(intr, b)
        assert ok.all()
        np.testing.assert_allclose(back, pix, atol=1e-7)

    def test_inverse_polynomial_seed_gives_same_answer(self, equi):
        theta = np.linspace(0.0, math.radians(90.0), 50)
        fitted = np.polynomial.polynomial.polyfit(math.pi / 2 - theta, R_EQUI * theta / (math.pi / 2), 6)
        seeded = FisheyeIntrinsics(cam2world=equi.cam2world, world2cam=tuple(fitted),
                                   center=equi.center, image_size=equi.image_size, fov_deg=190.0)
        b = np.stack([np.sin(theta), np.zeros_like(theta), np.cos(theta)], axis=1)
        np.testing.assert_allclose(project_bearings(seeded, b)[0], project_bearings(equi, b)[0],
                                   atol=1e-8)


class TestFaceAssignment:
    @pytest.mark.parametrize("b, face", [
        ((0, 0, 1), Face.FRONT),
        ((-1, 0, 0), Face.LEFT),
        ((1, 0, 0), Face.RIGHT),
        ((0, -1, 0), Face.UP),
        ((0, 1, 0), Face.DOWN),
        ((1 / math.sqrt(2), 0, 1 / math.sqrt(2)), Face.FRONT),
    ])
    def test_dominant_axis_and_ties(self, b, face):
        assert face_of(b) is face

    def test_back_inactive_by_default(self):
        with pytest.raises(NoFaceError):
            face_of((0, 0, -1))
        assert face_of((0, 0, -1), tuple(Face)) is Face.BACK

    def test_parse_face_names(self):
        assert parse_face("left") is Face.LEFT
        assert parse_face("Up") is Face.UP
        assert parse_face(4) is Face.DOWN
        with pytest.raises(ValueError):
            parse_face("sideways")


class TestCubemap:
    cam = CubemapCamera(650)

    def test_intrinsics(self):
        assert self.cam.focal == 325.0
        assert self.cam.principal_point == (324.5, 324.5)

    def test_on_axis_points(self):
        fp = project_cubemap(self.cam, (0, 0, 5))
        assert fp.face is Face.FRONT and (fp.u, fp.v) == (324.5, 324.5)
        fp = project_cubemap(self.cam, (-5, 0, 0))
        assert fp.face is Face.LEFT
        np.testing.assert_allclose(fp.uv, [324.5, 324.5], atol=1e-12)

    def test_corner_tie(self):
        fp = project_cubemap(self.cam, (1, 1, 1))
        assert fp.face is Face.FRONT
        np.testing.assert_allclose(fp.uv, [649.5, 649.5], atol=1e-12)
        np.testing.assert_allclose(unproject_cubemap(self.cam, fp), np.ones(3) / math.sqrt(3),
                                   atol=1e-15)

    def test_unproject_centres(self):
        np.testing.assert_allclose(unproject_cubemap(self.cam, FacePoint(Face.FRONT, 324.5, 324.5)),
                                   [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(unproject_cubemap(self.cam, FacePoint(Face.LEFT, 324.5, 324.5)),
                                   [-1, 0, 0], atol=1e-15)

    def test_errors(self):
        with pytest.raises(NoFaceError):
            project_cubemap(self.cam, (0, 0, -3))
        with pytest.raises(DegenerateError):
            project_cubemap(self.cam, (0, 0, 0))
        with pytest.raises(NoFaceError):
            unproject_cubemap(self.cam, FacePoint(Face.BACK, 10, 10))

    def test_face_size_validation(self):
        with pytest.raises(ValidationError):
            CubemapCamera(0)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3),
           st.floats(0.1, 100.0))
    def test_projection_round_trip(self, v, scale):
        v = np.array(v)
        if np.linalg.norm(v) < 1e-3:
            return
        P = scale * v / np.linalg.norm(v)
        if face_of(P / np.linalg.norm(P), tuple(Face)) is Face.BACK:
            return
        fp = project_cubemap(self.cam, P)
        assert self.cam.in_bounds(fp.uv)
        np.testing.assert_allclose(unproject_cubemap(self.cam, fp), P / np.linalg.norm(P),
                                   atol=1e-12)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(1)
        P = rng.normal(size=(400, 3))
        faces, uv = project_points(self.cam, P)
        for k in range(len(P)):
            if faces[k] < 0:
                with pytest.raises(NoFaceError):
                    project_cubemap(self.cam, P[k])
                continue
            fp = project_cubemap(self.cam, P[k])
            assert int(fp.face) == faces[k]
            np.testing.assert_allclose(fp.uv, uv[k], atol=1e-12)
        ok = faces >= 0
        np.testing.assert_allclose(unproject_points(self.cam, faces[ok], uv[ok]),
                                   P[ok] / np.linalg.norm(P[ok], axis=1, keepdims=True), atol=1e-12)
