import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pose
from oracles import brute_kitti
from plslam.errors import EmptySeries, NoAssociation, TrajectoryTooShort
from plslam.lie import Pose, se3_exp
from plslam.evaluation import (
    TrajectorySeries, associate, format_tum, kitti_metrics, metrics_report, read_tum, relative_pose_errors,
    rmse, write_metrics, write_tum,
)


def _line_series(n=101, step=0.5, scale=1.0):
    return TrajectorySeries(np.arange(n, dtype=float), [Pose(np.eye(3), [0, 0, step * scale * k]) for k in range(n)])


def _random_series(rng, n=40):
    poses = [random_pose(rng, 1.0, 3.0)]
    for _ in range(n - 1):
        poses.append(poses[-1] @ se3_exp(np.concatenate([rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.05])))
    return TrajectorySeries(np.arange(n) * 0.1, poses)


def test_rmse_example():
    assert rmse([3.0, 4.0]) == pytest.approx(np.sqrt(12.5))
    with pytest.raises(EmptySeries):
        rmse([])


def test_identical_trajectories_have_zero_error(rng):
    gt = _random_series(rng)
    te, re = relative_pose_errors(gt, gt)
    assert te.max() < 1e-12 and re.max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rpe_invariant_to_global_transform(seed):
    rng = np.random.default_rng(seed)
    gt = _random_series(rng, 15)
    noisy = TrajectorySeries(gt.stamps, [p @ se3_exp(rng.normal(size=6) * 0.01) for p in gt.poses])
    A = random_pose(rng, 2.0, 10.0)
    moved = TrajectorySeries(gt.stamps, [A @ p for p in noisy.poses])
    a, b = relative_pose_errors(gt, noisy), relative_pose_errors(gt, moved)
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)
    np.testing.assert_allclose(a[1], b[1], atol=1e-9)


def test_kitti_one_percent_scale_error():
    t_rel, r_rel = kitti_metrics(_line_series(), _line_series(scale=1.01), (5.0, 10.0, 20.0))
    assert t_rel == pytest.approx(1.0, abs=1e-9)
    assert r_rel == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_kitti_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gt = _random_series(rng, 60)
    est = TrajectorySeries(gt.stamps, [p @ se3_exp(rng.normal(size=6) * 0.02) for p in gt.poses])
    lengths = (2.0, 5.0, 10.0)
    ours = kitti_metrics(gt, est, lengths)
    ref = brute_kitti(gt.poses, est.poses, lengths)
    np.testing.assert_allclose(ours, ref, rtol=1e-9)


def test_kitti_too_short():
    with pytest.raises(TrajectoryTooShort):
        kitti_metrics(_line_series(5), _line_series(5), (5.0,))
    rep = metrics_report(_line_series(5), _line_series(5))
    assert rep["t_rel_percent"] is None and rep["pairs"] == 4


def test_association_by_timestamp():
    gt = TrajectorySeries([0.0, 1.0, 2.0, 3.0], [Pose.identity()] * 4)
    est = TrajectorySeries([0.005, 2.0, 2.5, 3.009], [Pose.identity()] * 4)
    assert associate(gt, est) == [(0, 0), (2, 1), (3, 3)]
    far = TrajectorySeries([10.0, 11.0], [Pose.identity()] * 2)
    with pytest.raises(NoAssociation):
        relative_pose_errors(gt, far)


def test_tum_round_trip(tmp_path, rng):
    s = _random_series(rng, 10)
    path = tmp_path / "traj.txt"
    write_tum(s, path)
    back = read_tum(path)
    np.testing.assert_allclose(back.stamps, s.stamps)
    for a, b in zip(back.poses, s.poses):
        assert a.allclose(b, 1e-8)
    assert all(len(r.split()) == 8 for r in format_tum(s).splitlines())


def test_series_validation():
    with pytest.raises(ValueError):
        TrajectorySeries([1.0, 0.5], [Pose.identity()] * 2)
    with pytest.raises(ValueError):
        TrajectorySeries([0.0], [])


def test_world_to_camera_convention():
    T_cw = Pose(np.eye(3), [0, 0, -2.0])
    s = TrajectorySeries.from_world_to_camera([0.0], [T_cw])
    np.testing.assert_allclose(s.positions()[0], [0, 0, 2.0])


def test_metrics_written_as_json(tmp_path):
    import json
    rep = metrics_report(_line_series(), _line_series(scale=1.01))
    write_metrics(rep, tmp_path / "m.json")
    back = json.loads((tmp_path / "m.json").read_text())
    assert back["t_rel_percent"] == pytest.approx(1.0)
    assert back["rmse_translation_m"] == pytest.approx(0.005)
