import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsdistill.camera import (
    encode_pose,
    focal_from_fov,
    make_orbit_cameras,
    orbit_camera,
    select_input_views,
)
from gsdistill.core import InvalidParameterError

angles = st.floats(-math.pi, math.pi)
elevations = st.floats(math.radians(-80), math.radians(80))


def test_four_cameras_quarter_turns():
    cams = make_orbit_cameras(4, 0.1, 2.0, 50.0, 32)
    np.testing.assert_allclose([c.azimuth for c in cams], [0, math.pi / 2, math.pi, 3 * math.pi / 2])


@given(angles, elevations, st.floats(0.5, 10))
def test_camera_invariants(az, el, radius):
    cam = orbit_camera(az, el, radius, 40.0, 32)
    r = cam.rotation
    assert np.abs(r @ r.T - np.eye(3)).max() < 1e-12 and abs(np.linalg.det(r) - 1) < 1e-12
    assert abs(np.linalg.norm(cam.center) - radius) < 1e-9
    fwd = r @ (np.zeros(3) - cam.center)
    np.testing.assert_allclose(fwd[:2], 0.0, atol=1e-9)
    assert fwd[2] > 0
    np.testing.assert_allclose(cam.project(np.zeros(3))[0], cam.principal_point, atol=1e-9)


def test_84_orbit():
    cams = make_orbit_cameras(84, math.radians(10), 2.6, 50.0, 64)
    assert len(cams) == 84
    np.testing.assert_allclose([np.linalg.norm(c.center) for c in cams], 2.6)
    gaps = np.diff([c.azimuth for c in cams] + [2 * math.pi])
    assert np.isclose(gaps.max(), 2 * math.pi / 84)


def test_orbit_errors():
    with pytest.raises(InvalidParameterError):
        make_orbit_cameras(0, 0.0, 2.0, 50.0, 32)
    with pytest.raises(InvalidParameterError):
        make_orbit_cameras(3, 0.0, 0.0, 50.0, 32)


def test_select_views_examples():
    assert select_input_views(8, 4) == [0, 2, 4, 6]
    assert select_input_views(84, 16) == [0, 5, 10, 15, 21, 26, 31, 36, 42, 47, 52, 57, 63, 68, 73, 78]
    assert select_input_views(5, 5) == [0, 1, 2, 3, 4]
    with pytest.raises(InvalidParameterError):
        select_input_views(4, 5)


@given(st.integers(1, 300).flatmap(lambda t: st.tuples(st.just(t), st.integers(1, t))))
def test_select_views_properties(args):
    total, n = args
    idx = select_input_views(total, n)
    assert len(idx) == n and idx[0] == 0 and all(b > a for a, b in zip(idx, idx[1:])) and idx[-1] < total


def test_pose_zero():
    enc = encode_pose(orbit_camera(0.0, 0.0, 2.0, 40.0, 32), 2)
    assert enc.shape == (8,)
    np.testing.assert_array_equal(enc[0::2], 0.0)
    np.testing.assert_array_equal(enc[1::2], 1.0)


def test_pose_half_turn():
    enc = encode_pose(orbit_camera(math.pi, 0.0, 2.0, 40.0, 32), 1)
    np.testing.assert_allclose(enc[:2], [0.0, -1.0], atol=1e-15)


@given(angles, elevations, st.integers(1, 6))
def test_pose_periodic_and_bounded(az, el, k):
    a = encode_pose(orbit_camera(az, el, 2.0, 40.0, 32), k)
    b = encode_pose(orbit_camera(az + 2 * math.pi, el, 2.0, 40.0, 32), k)
    assert len(a) == 4 * k and np.all(np.abs(a) <= 1)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pixel_rays_hit_pixel_centers():
    cam = orbit_camera(0.4, 0.3, 2.6, focal_from_fov(16), 16)
    origins, dirs = cam.pixel_rays(16, 16)
    pts = origins + 2.0 * dirs
    uv = cam.project(pts)
    jj, ii = np.meshgrid(np.arange(16), np.arange(16))
    np.testing.assert_allclose(uv, np.stack([jj.ravel(), ii.ravel()], 1), atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0)
