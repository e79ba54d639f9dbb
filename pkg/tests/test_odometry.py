import numpy as np
import pytest

from conftest import box_poses, box_world, numeric_jacobian, random_pose, rel_err
from plslam.camera import StereoCamera, project_camera
from plslam.errors import InsufficientMatches
from plslam.features import Match, infinite_line_coeffs
from plslam.lie import MotionEstimate, Pose, compose_with_covariance, se3_exp, se3_log
from plslam.odometry import (
    ENTROPY_CONST, FramePair, SolverConfig, build_frame_pair, entropy, estimate_motion, keyframe_decision,
    line_residual, line_residuals, point_residual, point_residuals, pseudo_huber, pseudo_huber_weight,
    solve_motion,
)
from plslam.simulator import NoiseModel, render_observations

NOISELESS = NoiseModel(0.0, 0.0, 0.0, 0.0)


def _hint_pair(cam, world, pa, pb, noise=NOISELESS):
    fa = render_observations(world, pa, cam, noise, 0, 0)
    fb = render_observations(world, pb, cam, noise, 0, 1)
    ib = {o.landmark_hint: i for i, o in enumerate(fb.points)}
    jb = {o.landmark_hint: i for i, o in enumerate(fb.lines)}
    pm = [Match(i, ib[o.landmark_hint], 0) for i, o in enumerate(fa.points) if o.landmark_hint in ib]
    lm = [Match(i, jb[o.landmark_hint], 0) for i, o in enumerate(fa.lines) if o.landmark_hint in jb]
    pair, _, _ = build_frame_pair(cam, fa, fb, pm, lm)
    return pair


def _config(rng):
    """Random pose and a point in front of it."""
    pose = random_pose(rng, 0.5, 1.0)
    Xc = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 10)])
    return pose, pose.inverse().apply(Xc)


def test_point_residual_zero_at_projection(cam, rng):
    pose, X = _config(rng)
    obs = project_camera(cam, pose.apply(X))
    e, _, _ = point_residual(cam, pose, X, obs)
    np.testing.assert_allclose(e, 0, atol=1e-12)


def test_point_residual_offset():
    cam = StereoCamera(500, 500, 320, 240)
    e, _, _ = point_residual(cam, Pose.identity(), [0, 0, 3], [321, 240])
    np.testing.assert_allclose(e, [1, 0], atol=1e-12)


def test_point_jacobians_match_finite_differences(cam, rng):
    for _ in range(100):
        pose, X = _config(rng)
        obs = project_camera(cam, pose.apply(X)) + rng.normal(size=2)
        _, Jp, Jx = point_residual(cam, pose, X, obs)
        fp = lambda d: point_residual(cam, se3_exp(d) @ pose, X, obs)[0]
        fx = lambda x: point_residual(cam, pose, x, obs)[0]
        assert rel_err(Jp, numeric_jacobian(fp, np.zeros(6))) < 1e-4
        assert rel_err(Jx, numeric_jacobian(fx, X)) < 1e-4


def test_line_residual_zero_when_incident(cam, rng):
    pose, P = _config(rng)
    _, Q = _config(np.random.default_rng(7))
    Q = pose.inverse().apply(pose.apply(P) + np.array([0.5, 0.3, 0.2]))
    l = infinite_line_coeffs(project_camera(cam, pose.apply(P)), project_camera(cam, pose.apply(Q)))
    e, _, _, _ = line_residual(cam, pose, P, Q, l)
    np.testing.assert_allclose(e, 0, atol=1e-9)


def test_line_residual_signed_distances():
    cam = StereoCamera(1, 1, 0, 0)
    l = infinite_line_coeffs((0, 0), (1, 0))
    e, _, _, _ = line_residual(cam, Pose.identity(), [0, 2, 1], [1, -2, 1], l)
    assert np.allclose(e, [2, -2]) or np.allclose(e, [-2, 2])


def test_line_jacobians_match_finite_differences(cam, rng):
    for _ in range(100):
        pose, P = _config(rng)
        Q = pose.inverse().apply(pose.apply(P) + rng.normal(size=3) * 0.5)
        if pose.apply(Q)[2] < 1:
            continue
        uv = project_camera(cam, pose.apply(np.array([P, Q]))) + rng.normal(size=(2, 2)) * 2
        l = infinite_line_coeffs(uv[0], uv[1])
        _, Jp, JP, JQ = line_residual(cam, pose, P, Q, l)
        fp = lambda d: line_residual(cam, se3_exp(d) @ pose, P, Q, l)[0]
        fP = lambda x: line_residual(cam, pose, x, Q, l)[0]
        fQ = lambda x: line_residual(cam, pose, P, x, l)[0]
        assert rel_err(Jp, numeric_jacobian(fp, np.zeros(6))) < 1e-4
        assert rel_err(JP, numeric_jacobian(fP, P)) < 1e-4
        assert rel_err(JQ, numeric_jacobian(fQ, Q)) < 1e-4


def test_right_image_residual_uses_baseline_shift(cam, rng):
    pose, X = _config(rng)
    Xc = pose.apply(X)
    ur = cam.fx * (Xc[0] - cam.baseline) / Xc[2] + cam.cx
    e, _, _, _ = point_residuals(cam, pose, X, [[ur, project_camera(cam, Xc)[1]]], shift=cam.baseline)
    np.testing.assert_allclose(e, 0, atol=1e-10)


def test_pseudo_huber_weight_is_derivative(rng):
    sq = rng.uniform(0, 50, 20)
    h = 1e-6
    num = (pseudo_huber(sq + h, 1.5) - pseudo_huber(sq - h, 1.5)) / (2 * h)
    np.testing.assert_allclose(pseudo_huber_weight(sq, 1.5), num, rtol=1e-6)
    np.testing.assert_allclose(pseudo_huber(np.array([1e-8]), 1.0), 1e-8, rtol=1e-6)


def test_noiseless_motion_recovered(cam):
    world = box_world(200, 50)
    pa, pb = box_poses(2, 0.3)
    pair = _hint_pair(cam, world, pa, pb)
    est = estimate_motion(pair, cam)
    gt = se3_log(pb @ pa.inverse())
    np.testing.assert_allclose(est.mean, gt, atol=1e-6)
    assert est.inlier_ratio == 1.0


def test_zero_motion_zero_first_step(cam):
    world = box_world(200, 50)
    p = box_poses(1)[0]
    pair = _hint_pair(cam, world, p, p)
    sol = solve_motion(pair, cam, SolverConfig(), np.zeros(6))
    assert sol.first_step_norm < 1e-10
    np.testing.assert_allclose(se3_log(sol.pose), 0, atol=1e-10)


def test_gross_outliers_flagged(cam):
    rng = np.random.default_rng(3)
    world = box_world(200, 50)
    pa, pb = box_poses(2, 0.3)
    pair = _hint_pair(cam, world, pa, pb)
    n_out = pair.n_points // 5
    bad = rng.choice(pair.n_points, n_out, replace=False)
    pair.points_obs[bad] += rng.uniform(30, 80, size=(n_out, 2)) * rng.choice([-1, 1], size=(n_out, 2))
    sol = solve_motion(pair, cam)
    np.testing.assert_allclose(se3_log(sol.pose), se3_log(pb @ pa.inverse()), atol=1e-4)
    assert not sol.point_inliers[bad].any()
    assert sol.point_inliers.sum() == pair.n_points - n_out
    costs = sol.robust_costs
    assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_too_few_correspondences(cam):
    pair = FramePair(np.ones((3, 3)), np.ones((3, 2)))
    with pytest.raises(InsufficientMatches):
        solve_motion(pair, cam)


def test_entropy_examples(rng):
    assert entropy(np.eye(6)) == pytest.approx(8.51363, abs=1e-5)
    assert entropy(np.eye(6)) == pytest.approx(ENTROPY_CONST, abs=1e-15)
    assert entropy(4.0 * np.eye(6)) - entropy(np.eye(6)) == pytest.approx(3 * np.log(4.0), abs=1e-12)
    A = rng.normal(size=(6, 6))
    S = A @ A.T + 0.1 * np.eye(6)
    lam = np.linalg.eigvalsh(S)
    ref = 0.5 * np.log((2 * np.pi * np.e) ** 6 * np.prod(lam))
    assert entropy(S) == pytest.approx(ref, abs=1e-10)


def test_keyframe_decision_examples():
    assert not keyframe_decision(5.0, 5.0)
    assert keyframe_decision(0.89, 1.0)
    assert not keyframe_decision(0.91, 1.0)
    # tight covariances give negative entropies; a growing span still lowers the ratio
    assert keyframe_decision(-8.0, -10.0)
    assert not keyframe_decision(-9.5, -10.0)
    assert keyframe_decision(1.0, -1.0)


def test_pure_drift_drives_ratio_down_until_insertion():
    step = MotionEstimate(np.array([0.1, 0, 0, 0, 0.01, 0]), np.eye(6) * 1e-3)
    h_first = entropy(step.covariance)
    span = step
    ratios = []
    for _ in range(50):
        span = compose_with_covariance(span, step)
        ratios.append(entropy(span.covariance) / h_first)
        if keyframe_decision(entropy(span.covariance), h_first):
            break
    assert all(b < a for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] < 0.9
