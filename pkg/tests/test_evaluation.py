import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from asanet import evaluation as E
from asanet.networks import ComponentSet
from oracles import depth_metrics_loop, horn_similarity, odometry_errors_loop, random_trajectory


def test_depth_metrics_perfect_prediction():
    gt = np.random.default_rng(0).uniform(1, 70, (20, 30))
    m = E.depth_metrics(gt, gt)
    assert m.abs_rel == m.sq_rel == m.rmse == m.rmse_log == 0.0
    assert m.delta1 == m.delta2 == m.delta3 == 1.0


def test_depth_metrics_median_scaling_invariance():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 70, (20, 30))
    pred = gt * rng.uniform(0.8, 1.2, gt.shape)
    a, b = E.depth_metrics(pred, gt), E.depth_metrics(2 * pred, gt)
    np.testing.assert_allclose(a.values(), b.values(), rtol=1e-12)
    assert E.depth_metrics(2 * gt, gt).abs_rel == pytest.approx(0.0, abs=1e-15)


def test_depth_metrics_hand_example():
    gt = np.array([[2.0, 4.0]])
    pred = np.array([[2.4, 3.0]])
    m = E.depth_metrics(pred, gt, median_scale=False)
    assert m.abs_rel == pytest.approx((0.2 + 0.25) / 2)
    assert m.rmse == pytest.approx(math.sqrt((0.16 + 1.0) / 2))
    assert m.delta1 == pytest.approx(0.5)


def test_depth_metrics_ignores_invalid_and_capped_pixels():
    gt = np.array([[0.0, 10.0, 90.0]])
    pred = np.array([[5.0, 10.0, 1.0]])
    m = E.depth_metrics(pred, gt)
    assert m.count == 1 and m.abs_rel == 0.0


def test_depth_metrics_empty_and_shape_errors():
    assert E.depth_metrics(np.ones((2, 2)), np.zeros((2, 2))).is_empty
    with pytest.raises(ValueError):
        E.depth_metrics(np.ones((2, 2)), np.ones((3, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_depth_metrics_match_loop(seed, median):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 100, (6, 7))
    gt[rng.random(gt.shape) < 0.3] = 0
    pred = rng.uniform(0.5, 90, gt.shape)
    ref = depth_metrics_loop(pred, gt, median_scale=median)
    got = E.depth_metrics(pred, gt, median_scale=median)
    if ref is None:
        assert got.is_empty
    else:
        np.testing.assert_allclose(got.values(), ref, rtol=1e-10, atol=1e-12)


def test_metric_mean_skips_empty():
    a = E.DepthMetrics(*([1.0] * 7), count=3)
    b = E.DepthMetrics(*([3.0] * 7), count=5)
    m = E.DepthMetrics.mean([a, E.DepthMetrics(), b])
    assert m.abs_rel == 2.0 and m.count == 8


def test_eigen_crop_region():
    mask = E.eigen_crop_mask(375, 1242)
    rows, cols = np.nonzero(mask)
    assert (rows.min(), rows.max() + 1) == (153, 371)
    assert (cols.min(), cols.max() + 1) == (44, 1197)


def test_accumulate_trajectory_chains_relative_poses():
    rel = np.eye(4)
    rel[:3, :3] = Rotation.from_rotvec([0, 0.1, 0]).as_matrix()
    rel[2, 3] = 1.0
    traj = E.accumulate_trajectory([rel] * 3)
    np.testing.assert_allclose(traj.poses[3], np.linalg.matrix_power(rel, 3), atol=1e-12)
    assert len(traj) == 4


def test_accumulate_trajectory_rejects_invalid():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ValueError):
        E.accumulate_trajectory([bad])
    nan = np.eye(4)
    nan[0, 3] = np.nan
    with pytest.raises(ValueError):
        E.accumulate_trajectory([nan])


def test_trajectory_indices_must_be_contiguous():
    with pytest.raises(ValueError):
        E.Trajectory(np.tile(np.eye(4), (3, 1, 1)), indices=[0, 1, 3])


def test_alignment_identity_and_pure_scale():
    ref = E.Trajectory(random_trajectory(np.random.default_rng(0), 30))
    s, tf, _ = E.align_umeyama_7dof(ref, ref)
    assert s == pytest.approx(1.0) and np.allclose(tf, np.eye(4), atol=1e-10)
    half = ref.poses.copy()
    half[:, :3, 3] *= 0.5
    s, tf, _ = E.align_umeyama_7dof(E.Trajectory(half), ref)
    assert s == pytest.approx(2.0) and np.allclose(tf[:3, :3], np.eye(3), atol=1e-10)


def test_alignment_recovers_rotation_and_scale():
    ref = E.Trajectory(random_trajectory(np.random.default_rng(1), 40))
    rot = Rotation.from_euler("z", 30, degrees=True).as_matrix()
    est = ref.poses.copy()
    est[:, :3, 3] = 0.7 * ref.positions @ rot.T
    est[:, :3, :3] = rot @ ref.poses[:, :3, :3]
    al = E.align_umeyama_7dof(E.Trajectory(est), ref)
    assert al.scale == pytest.approx(1 / 0.7, rel=1e-12)
    np.testing.assert_allclose(al.transform[:3, :3], rot.T, atol=1e-12)
    assert al.rmse < 1e-9


def test_alignment_collinear_falls_back_to_scale():
    ref = np.tile(np.eye(4), (10, 1, 1))
    ref[:, 2, 3] = np.arange(10.0)
    est = ref.copy()
    est[:, 2, 3] *= 0.5
    al = E.align_umeyama_7dof(E.Trajectory(est), E.Trajectory(ref))
    assert al.degenerate and al.scale == pytest.approx(2.0)
    np.testing.assert_allclose(al.transform, np.eye(4))


def test_alignment_matches_horn():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(15, 3))
    dst = rng.normal(size=(15, 3))
    s, rot, t, _ = E.umeyama(src, dst)
    s2, rot2, t2 = horn_similarity(src, dst)
    assert s == pytest.approx(s2, rel=1e-10)
    np.testing.assert_allclose(rot, rot2, atol=1e-10)
    np.testing.assert_allclose(t, t2, atol=1e-10)


def test_odometry_errors_zero_for_ground_truth():
    ref = E.Trajectory(random_trajectory(np.random.default_rng(3), 120))
    errs = E.odometry_errors(ref, ref)
    assert errs.segments > 0
    assert errs.t_err == pytest.approx(0.0, abs=1e-9) and errs.r_err == pytest.approx(0.0, abs=1e-9)


def test_odometry_errors_straight_path_scale_drift():
    """1000 m straight line, estimate inflated by 1 %: every segment drifts 1 %."""
    ref = np.tile(np.eye(4), (1001, 1, 1))
    ref[:, 2, 3] = np.arange(1001.0)
    est = ref.copy()
    est[:, 2, 3] *= 1.01
    errs = E.odometry_errors(E.Trajectory(est), E.Trajectory(ref))
    assert errs.t_err == pytest.approx(1.0, abs=1e-9)
    assert errs.r_err == pytest.approx(0.0, abs=1e-12)


def test_odometry_errors_short_trajectory_is_empty():
    ref = E.Trajectory(random_trajectory(np.random.default_rng(4), 5, step=1.0))
    assert E.odometry_errors(ref, ref).is_empty


def test_odometry_errors_match_loop():
    rng = np.random.default_rng(5)
    ref = random_trajectory(rng, 90)
    est = random_trajectory(rng, 90)
    got = E.odometry_errors(E.Trajectory(est), E.Trajectory(ref), step=3)
    t_ref, r_ref = odometry_errors_loop(est, ref, E.SEGMENT_LENGTHS, step=3)
    assert got.t_err == pytest.approx(t_ref, rel=1e-10)
    assert got.r_err == pytest.approx(r_ref, rel=1e-10)


def test_pose_file_format(tmp_path):
    traj = E.Trajectory(random_trajectory(np.random.default_rng(6), 7))
    path = tmp_path / "poses.txt"
    E.write_pose_file(path, traj)
    rows = np.loadtxt(path)
    assert rows.shape == (7, 12)
    np.testing.assert_allclose(rows.reshape(7, 3, 4), traj.poses[:, :3, :], rtol=1e-9)


def test_inference_latency_runs():
    nets = ComponentSet()
    ms, samples = E.inference_latency(nets, trials=2, image_size=(64, 64), warmup=1, return_samples=True)
    assert ms > 0 and len(samples) == 2
    with pytest.raises(ValueError):
        E.inference_latency(nets, trials=0)
    assert nets.training
    torch.set_grad_enabled(True)
