import math

import numpy as np
import pytest

from rigvo.geometry import Pose, rotation_angle, so3_exp, unproject
from rigvo.sfm import (
    CameraSfmTrajectory,
    SfmFailure,
    estimate_relative_pose,
    monocular_sfm_window,
    pnp_refine,
    triangulate_pair,
    triangulate_rays,
)
from rigvo.simulator import (
    NoiseSpec,
    TrajectorySpec,
    generate_trajectory,
    ray_observations,
    render_observations,
    sample_landmarks,
)

from conftest import make_test_rig


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def two_view_scene(n_points=100, seed=0, rot_vec=(0.05, 0.3, -0.1), baseline=(1.0, 0.2, 0.1)):
    """Random points in front of two cameras; returns rays and the truth."""
    rng = np.random.default_rng(seed)
    points = rng.uniform([-4, -4, 4], [4, 4, 12], size=(n_points, 3))
    pose_a = Pose.identity()
    pose_b = Pose.from_rt(so3_exp(rot_vec), baseline)
    rays_a = np.array([unit(p) for p in points])
    rays_b = np.array([unit(pose_b.rotation.T @ (p - pose_b.t)) for p in points])
    return rays_a, rays_b, pose_b, points


class TestRelativePose:
    def test_noiseless_exact(self):
        rays_a, rays_b, pose_b, _ = two_view_scene()
        rot, t, mask = estimate_relative_pose(rays_a, rays_b, rng=np.random.default_rng(1))
        assert mask.sum() >= 95
        assert rotation_angle(rot.T @ pose_b.rotation) < 1e-6
        t_true = unit(pose_b.t)
        assert math.acos(np.clip(abs(t @ t_true), 0, 1)) < 1e-6

    def test_pure_rotation_flagged(self):
        rng = np.random.default_rng(2)
        points = rng.uniform([-4, -4, 4], [4, 4, 12], size=(60, 3))
        rot = so3_exp([0.0, 0.2, 0.1])
        rays_a = np.array([unit(p) for p in points])
        rays_b = np.array([unit(rot.T @ p) for p in points])
        with pytest.raises(SfmFailure, match="parallax"):
            estimate_relative_pose(rays_a, rays_b, rng=np.random.default_rng(3))

    def test_outlier_rejection(self):
        rays_a, rays_b, pose_b, _ = two_view_scene(n_points=100, seed=4)
        rng = np.random.default_rng(5)
        n_out = 30
        bad = rng.choice(100, size=n_out, replace=False)
        rays_b = rays_b.copy()
        for i in bad:
            rays_b[i] = unit(rng.normal(size=3))
        rot, t, mask = estimate_relative_pose(rays_a, rays_b, rng=np.random.default_rng(6))
        excluded = np.sum(~mask[bad])
        assert excluded >= 0.95 * n_out
        assert rotation_angle(rot.T @ pose_b.rotation) < 1e-3

    def test_too_few_matches(self):
        rays = np.tile(unit([0, 0, 1.0]), (5, 1))
        with pytest.raises(SfmFailure):
            estimate_relative_pose(rays, rays)


class TestTriangulate:
    def test_exact_recovery(self):
        pose_a = Pose.identity()
        pose_b = Pose(t=[1.0, 0.0, 0.0])
        point = np.array([0.3, -0.2, 5.0])
        rays_a = [unit(point)]
        rays_b = [unit(point - pose_b.t)]
        pts, da, db, ok = triangulate_pair(pose_a, pose_b, rays_a, rays_b)
        assert ok[0]
        assert np.linalg.norm(pts[0] - point) < 1e-9

    def test_zero_baseline_rejected(self):
        pose = Pose.identity()
        rays = [unit([0.1, 0.2, 1.0])]
        _, _, _, ok = triangulate_pair(pose, pose, rays, rays)
        assert not ok.any()

    def test_parallel_rays_rejected(self):
        pose_a = Pose.identity()
        pose_b = Pose(t=[1.0, 0.0, 0.0])
        ray = unit([0.0, 0.0, 1.0])
        with pytest.raises(SfmFailure):
            triangulate_rays([pose_a, pose_b], [ray, ray])

    def test_negative_depth_rejected(self):
        pose_a = Pose.identity()
        pose_b = Pose(t=[1.0, 0.0, 0.0])
        point = np.array([0.3, -0.2, 5.0])
        # flip one ray: intersection lands behind a camera
        rays_a = [unit(point)]
        rays_b = [-unit(point - pose_b.t)]
        _, _, _, ok = triangulate_pair(pose_a, pose_b, rays_a, rays_b)
        assert not ok.any()

    def test_simulator_window_up_to_scale(self, rig4):
        traj = generate_trajectory(TrajectorySpec("circle", 12, speed=3.0))
        cloud = sample_landmarks(300, traj, (3.0, 25.0), seed=30)
        sim = render_observations(rig4, traj, cloud, NoiseSpec())
        cam = 0
        ext = rig4.extrinsic(cam).cam_in_body
        checked = 0
        for tid, obs in sim.tracks.tracks[cam].items():
            if len(obs) < 2:
                continue
            frames = [f for f, _ in obs]
            poses = [traj[f].compose(ext) for f in frames]
            rays = [unproject(pix, rig4.intrinsic(cam)) for _, pix in obs]
            try:
                point, depths = triangulate_rays(poses, rays)
            except SfmFailure:
                continue
            lm = sim.track_landmark[cam][tid]
            assert np.linalg.norm(point - cloud.points[lm]) < 1e-6
            checked += 1
        assert checked >= 30


class TestPnp:
    def scene(self, seed=7):
        rng = np.random.default_rng(seed)
        points = rng.uniform([-4, -4, 3], [4, 4, 15], size=(40, 3))
        pose = Pose.from_rt(so3_exp([0.1, -0.2, 0.3]), [0.5, 1.0, -0.3])
        rays = np.array([unit(pose.rotation.T @ (p - pose.t)) for p in points])
        return points, rays, pose

    def test_ground_truth_fixed_point(self):
        points, rays, pose = self.scene()
        out = pnp_refine(points, rays, pose)
        assert np.linalg.norm(out.t - pose.t) < 1e-10
        assert rotation_angle(out.rotation.T @ pose.rotation) < 1e-10

    def test_recovers_from_perturbation(self):
        points, rays, pose = self.scene()
        init = Pose.from_rt(pose.rotation @ so3_exp([0.05, -0.08, 0.02]), pose.t + [0.2, -0.1, 0.1])
        out = pnp_refine(points, rays, init)
        assert np.linalg.norm(out.t - pose.t) < 1e-8
        assert rotation_angle(out.rotation.T @ pose.rotation) < 1e-8

    def test_three_points_rejected(self):
        points, rays, pose = self.scene()
        with pytest.raises(SfmFailure):
            pnp_refine(points[:3], rays[:3], pose)


class TestMonocularSfmWindow:
    def window_rays(self, rig, cam, noise=None, kind="circle", frames=11, seed=40):
        # a window sliced out of a longer run: gentle curvature, real baselines
        traj = generate_trajectory(TrajectorySpec(kind, 60, speed=3.0, seed=seed))
        cloud = sample_landmarks(500, traj, (3.0, 25.0), seed=seed)
        sim = render_observations(rig, traj, cloud, noise or NoiseSpec())
        rays = ray_observations(sim, rig, cam, range(frames))
        ext = rig.extrinsic(cam).cam_in_body
        gt_cam = [traj[t].compose(ext) for t in range(frames)]
        anchor = gt_cam[0].inverse()
        gt_anchored = [anchor.compose(p) for p in gt_cam]
        return rays, gt_anchored

    def test_noiseless_matches_ground_truth(self, rig4):
        for cam in range(2):
            rays, gt = self.window_rays(rig4, cam)
            sfm = monocular_sfm_window(rays, cam, rng=np.random.default_rng(41))
            # Procrustes-style: single positive scale aligns all translations
            num = sum(float(sfm.translations[t] @ gt[t].t) for t in range(len(gt)))
            den = sum(float(sfm.translations[t] @ sfm.translations[t]) for t in range(len(gt)))
            scale = num / den
            assert scale > 0
            for t in range(len(gt)):
                assert rotation_angle(sfm.rotations[t].T @ gt[t].rotation) < 1e-6
                assert np.linalg.norm(scale * sfm.translations[t] - gt[t].t) < 1e-6

    def test_straight_line_with_parallax_succeeds(self, rig4):
        rays, gt = self.window_rays(rig4, 0, kind="straight_line")
        sfm = monocular_sfm_window(rays, 0, rng=np.random.default_rng(42))
        assert len(sfm) == len(gt)
        for t in range(len(gt)):
            assert rotation_angle(sfm.rotations[t].T @ gt[t].rotation) < 1e-5

    def test_insufficient_tracks_fail(self):
        rays = [{i: unit([0.01 * i, 0.0, 1.0]) for i in range(5)} for _ in range(11)]
        with pytest.raises(SfmFailure):
            monocular_sfm_window(rays, 0)


def test_sfm_trajectory_invariants():
    with pytest.raises(ValueError):
        CameraSfmTrajectory(0, [np.eye(3) * 2.0], [np.zeros(3)])
    with pytest.raises(ValueError):
        CameraSfmTrajectory(0, [np.eye(3)], [np.ones(3)])
