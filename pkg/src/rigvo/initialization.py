"""Initialization gating, per-camera SfM orchestration, and assembly of the
first sliding-window state at metric scale.

The window becomes eligible once every camera stream accumulates more than
30 px of parallax across the 10-frame span; the camera with the highest
tracking stability anchors the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import Landmark, SlidingWindowState
from .frontend import FeatureTrackTable, track_stability
from .geometry import RigConfig, unproject
from .scale import (
    DegenerateMotionError,
    ScaleEstimate,
    body_hypothesis,
    build_scale_system,
    solve_scales,
)
from .sfm import SfmFailure, monocular_sfm_window, triangulate_rays

INIT_WINDOW_SPAN = 10  # frames of motion; the window holds span+1 poses
PARALLAX_THRESHOLD_PX = 30.0


@dataclass
class InitializationReport:
    ready: bool
    principal_camera: int | None = None
    parallax_px: list = field(default_factory=list)
    sfm_inliers: dict = field(default_factory=dict)
    sfm_failures: dict = field(default_factory=dict)
    scales: np.ndarray | None = None
    residual_rms: float | None = None
    condition_number: float | None = None

    def text(self):
        lines = ["initialization report"]
        lines.append(f"  ready: {self.ready}")
        if self.parallax_px:
            px = ", ".join(f"{p:.1f}" for p in self.parallax_px)
            lines.append(f"  window parallax (px): {px}")
        if self.principal_camera is not None:
            lines.append(f"  principal camera: {self.principal_camera}")
        for cam, n in sorted(self.sfm_inliers.items()):
            lines.append(f"  cam {cam}: {n} epipolar inliers")
        for cam, msg in sorted(self.sfm_failures.items()):
            lines.append(f"  cam {cam}: SfM failed ({msg})")
        if self.scales is not None:
            lines.append(f"  scales: {np.round(self.scales, 6).tolist()}")
            lines.append(f"  residual rms: {self.residual_rms:.3e} m")
            lines.append(f"  condition number: {self.condition_number:.3e}")
        return "\n".join(lines)


def check_initialization_ready(table: FeatureTrackTable, end_frame=None,
                               span=INIT_WINDOW_SPAN,
                               parallax_threshold=PARALLAX_THRESHOLD_PX):
    """Window gating: every camera must clear the parallax threshold.

    Returns (ready, principal_camera, per-camera window parallax). The
    principal camera maximizes mean in-window track lifespan; not-ready is
    a normal outcome (principal is None then).
    """
    end = table.last_frame if end_frame is None else end_frame
    if end is None or end - span < (min(table.frames()) if table.frames() else 0):
        return False, None, [0.0] * table.n_cameras
    parallax = [
        table.window_parallax(cam, span, end) for cam in range(table.n_cameras)
    ]
    ready = all(p > parallax_threshold for p in parallax)
    principal = None
    if ready:
        stabilities = [
            track_stability(table, cam, (end - span, end))
            for cam in range(table.n_cameras)
        ]
        principal = int(np.argmax(stabilities))
    return ready, principal, parallax


def run_window_sfm(table: FeatureTrackTable, rig: RigConfig, frames, rng=None):
    """Monocular SfM per camera over the window frames.

    Returns (trajectories dict cam -> CameraSfmTrajectory, report fields).
    Cameras whose SfM fails are simply absent from the result.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    trajectories = {}
    inliers = {}
    failures = {}
    for cam in range(rig.n_cameras):
        intr = rig.intrinsic(cam)
        ray_obs = []
        for f in frames:
            frame_rays = {}
            for tid, pix in table.observations_at(cam, f):
                frame_rays[tid] = unproject(pix, intr)
            ray_obs.append(frame_rays)
        threshold = 1.0 / float(intr.fx)
        try:
            sfm = monocular_sfm_window(
                ray_obs, cam, inlier_threshold=threshold, rng=rng
            )
        except SfmFailure as err:
            failures[cam] = str(err)
            continue
        trajectories[cam] = sfm
        inliers[cam] = sum(len(fr) for fr in ray_obs)
    return trajectories, inliers, failures


def estimate_window_scales(trajectories, rig: RigConfig, refine_lm=False):
    """Build and solve the multi-camera scale system.

    Requires at least two successful SfM reconstructions.
    """
    cams = sorted(trajectories)
    if len(cams) < 2:
        raise DegenerateMotionError(
            "fewer than two cameras completed SfM", {"cameras": cams}
        )
    system = build_scale_system(
        [trajectories[c] for c in cams], [rig.extrinsic(c) for c in cams]
    )
    estimate = solve_scales(system, refine_lm=refine_lm)
    return system, estimate


def initialize_state(trajectories, estimate: ScaleEstimate, table: FeatureTrackTable,
                     rig: RigConfig, principal, frames,
                     capacity=INIT_WINDOW_SPAN + 1) -> SlidingWindowState:
    """Assemble the first sliding-window state.

    Body poses come from the principal camera's hypothesis at its solved
    scale (identity at the window start). Landmarks are triangulated per
    camera from the metrically scaled camera poses and stored as inverse
    depths on their first-observation ray.

    Raises DegenerateMotionError when the estimate is unobservable.
    """
    if not estimate.observable:
        raise DegenerateMotionError(
            f"scale estimate unobservable: {estimate.reason}",
            {
                "condition_number": estimate.condition_number,
                "scales": estimate.scales.tolist(),
                "residual_rms": estimate.residual_rms,
            },
        )
    cams = sorted(trajectories)
    scale_of = {c: float(estimate.scales[i]) for i, c in enumerate(cams)}
    if principal not in trajectories:
        principal = cams[0]

    hyp = body_hypothesis(
        trajectories[principal], rig.extrinsic(principal), scale_of[principal]
    )
    state = SlidingWindowState(capacity=max(capacity, len(frames)))
    for k, f in enumerate(frames):
        state.add_frame(f, hyp.poses[k].copy())
    scales_full = np.ones(rig.n_cameras)
    for c, s in scale_of.items():
        scales_full[c] = s
    state.scales = scales_full

    frame_index = {f: k for k, f in enumerate(frames)}
    for cam in cams:
        intr = rig.intrinsic(cam)
        ext = rig.extrinsic(cam).cam_in_body
        cam_poses = {f: state.poses[f].compose(ext) for f in frames}
        for tid, obs in table.tracks[cam].items():
            in_window = [(f, pix) for f, pix in obs if f in frame_index]
            if len(in_window) < 2:
                continue
            rays = [unproject(pix, intr) for _, pix in in_window]
            poses = [cam_poses[f] for f, _ in in_window]
            try:
                point, depths = triangulate_rays(poses, rays)
            except SfmFailure:
                continue
            if np.any(depths <= 0):
                continue
            anchor_frame, _ = in_window[0]
            anchor_pose = cam_poses[anchor_frame]
            p_cam = anchor_pose.rotation.T @ (point - anchor_pose.t)
            rng = float(np.linalg.norm(p_cam))
            if rng < 1e-9:
                continue
            state.landmarks[(cam, tid)] = Landmark(
                camera=cam,
                track_id=tid,
                anchor_frame=anchor_frame,
                anchor_ray=rays[0],
                inv_depth=1.0 / rng,
            )
    return state
