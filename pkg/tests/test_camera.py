import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from plslam.camera import (
    D_MIN, StereoCamera, backproject_many, depth_to_disparity, disparity_of, project_point, stereo_backproject,
)
from plslam.errors import DegenerateDisparity, NonPositiveDepth
from plslam.lie import Pose


def test_unit_camera_principal_ray():
    cam = StereoCamera(1, 1, 0, 0)
    np.testing.assert_allclose(project_point(cam, Pose.identity(), [0, 0, 1]), [0, 0])


def test_principal_point_projection():
    cam = StereoCamera(500, 500, 320, 240)
    np.testing.assert_allclose(project_point(cam, Pose.identity(), [0, 0, 2]), [320, 240])


def test_projection_behind_camera_raises(cam):
    with pytest.raises(NonPositiveDepth):
        project_point(cam, Pose.identity(), [0, 0, -1])


def test_backproject_depth_from_disparity():
    cam = StereoCamera(500, 500, 320, 240, baseline=1.0)
    X = stereo_backproject(cam, 320, 240, 250)
    np.testing.assert_allclose(X, [0, 0, 2])


def test_backproject_rejects_small_disparity(cam):
    with pytest.raises(DegenerateDisparity):
        stereo_backproject(cam, 100, 100, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 640), st.floats(0, 480), st.floats(0.5, 200))
def test_backproject_then_project_round_trip(u, v, d):
    cam = StereoCamera(400, 410, 320, 240, 0.3)
    X = stereo_backproject(cam, u, v, d)
    np.testing.assert_allclose(project_point(cam, Pose.identity(), X), [u, v], atol=1e-9)
    assert abs(disparity_of(cam, X) - d) < 1e-9 * d


def test_backproject_many_matches_scalar(cam, rng):
    uv = rng.uniform([0, 0], [640, 480], size=(20, 2))
    d = rng.uniform(1, 50, size=20)
    ref = np.array([stereo_backproject(cam, a, b, c) for (a, b), c in zip(uv, d)])
    np.testing.assert_allclose(backproject_many(cam, uv, d), ref, rtol=1e-14)


def test_depth_to_disparity_examples():
    assert depth_to_disparity(2.0, 1.0, 500.0) == 250.0
    assert depth_to_disparity(0.3 * 400.0, 0.3, 400.0) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(NonPositiveDepth):
        depth_to_disparity(0.0, 1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 100), st.floats(0.05, 2), st.floats(100, 1000))
def test_depth_disparity_round_trip(Z, b, f):
    cam = StereoCamera(f, f, 0, 0, b)
    d = depth_to_disparity(Z, b, f)
    assume(d > D_MIN)
    assert abs(stereo_backproject(cam, 0, 0, d)[2] - Z) <= 1e-12 * Z


def test_camera_validates_parameters():
    with pytest.raises(ValueError):
        StereoCamera(0, 1, 0, 0)
