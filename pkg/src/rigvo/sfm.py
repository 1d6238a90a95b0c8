"""Two-view geometry and windowed monocular structure-from-motion.

All camera poses here are world_T_cam with the "world" being whatever
frame anchors the reconstruction (frame 0 of a window for SfM output).
Image measurements enter as unit rays in the camera frame, which keeps
wide-angle fisheye cameras on the same code path as pinholes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, so3_exp

RANSAC_ITERS = 200
MIN_EPIPOLAR_MATCHES = 8
LOW_PARALLAX_ANGLE = 1e-4  # rad, rays closer than this are untriangulable


class SfmFailure(Exception):
    """A stage of the SfM chain could not produce a usable result."""


@dataclass
class CameraSfmTrajectory:
    """Scale-ambiguous per-camera window poses, frame 0 at identity."""

    camera_index: int
    rotations: list = field(default_factory=list)  # world_T_cam rotations
    translations: list = field(default_factory=list)

    def __post_init__(self):
        if self.rotations:
            if not np.allclose(self.rotations[0], np.eye(3), atol=1e-9):
                raise ValueError("frame-0 rotation must be identity")
            if not np.allclose(self.translations[0], 0.0, atol=1e-9):
                raise ValueError("frame-0 translation must be zero")

    def __len__(self):
        return len(self.rotations)

    def pose(self, t) -> Pose:
        return Pose.from_rt(self.rotations[t], self.translations[t])


def _eight_point(rays_a, rays_b):
    """Essential matrix from ray correspondences (direct linear solve)."""
    a = np.einsum("ni,nj->nij", rays_b, rays_a).reshape(len(rays_a), 9)
    _, _, vt = np.linalg.svd(a)
    e = vt[-1].reshape(3, 3)
    # enforce the (s, s, 0) singular structure
    u, s, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u[:, -1] *= -1
    if np.linalg.det(vt) < 0:
        vt[-1, :] *= -1
    sigma = 0.5 * (s[0] + s[1])
    return u @ np.diag([sigma, sigma, 0.0]) @ vt


def _epipolar_angles(e_mat, rays_a, rays_b):
    """Angular distance of each ray pair from its epipolar plane (rad)."""
    n = rays_a @ e_mat.T  # plane normals in frame b
    norms = np.linalg.norm(n, axis=1)
    norms = np.where(norms < 1e-15, 1.0, norms)
    sines = np.abs(np.einsum("ni,ni->n", rays_b, n)) / norms
    return np.arcsin(np.clip(sines, 0.0, 1.0))


def _decompose_essential(e_mat):
    u, _, vt = np.linalg.svd(e_mat)
    if np.linalg.det(u) < 0:
        u[:, -1] *= -1
    if np.linalg.det(vt) < 0:
        vt[-1, :] *= -1
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1, r2 = u @ w @ vt, u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def triangulate_rays(poses, rays, min_angle=LOW_PARALLAX_ANGLE):
    """N-view midpoint triangulation.

    poses: list of world_T_cam Pose; rays: (N,3) unit rays, one per view.
    Returns (point (3,), depths (N,) range along each ray) or raises
    SfmFailure when no ray pair subtends at least min_angle.
    """
    rays = np.asarray(rays, dtype=float)
    dirs = np.array([p.rotation @ r for p, r in zip(poses, rays)])
    centers = np.array([p.t for p in poses])

    max_angle = 0.0
    for i in range(len(dirs)):
        for j in range(i + 1, len(dirs)):
            dot = np.clip(abs(float(dirs[i] @ dirs[j])), 0.0, 1.0)
            max_angle = max(max_angle, math.acos(dot))
    if max_angle < min_angle:
        raise SfmFailure("rays near parallel")

    a = np.zeros((3, 3))
    b = np.zeros(3)
    for d, c in zip(dirs, centers):
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ c
    point = np.linalg.solve(a, b)
    depths = np.einsum("ni,ni->n", point[None, :] - centers, dirs)
    return point, depths


def triangulate_pair(pose_a: Pose, pose_b: Pose, rays_a, rays_b, min_angle=LOW_PARALLAX_ANGLE):
    """Two-view triangulation of matched rays.

    Returns (points (N,3), depths_a, depths_b, ok mask); points failing the
    parallax or cheirality checks are NaN with ok False.
    """
    rays_a = np.asarray(rays_a, dtype=float)
    rays_b = np.asarray(rays_b, dtype=float)
    if np.linalg.norm(pose_a.t - pose_b.t) < 1e-12:
        n = len(rays_a)
        return np.full((n, 3), np.nan), np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool)
    n = len(rays_a)
    points = np.full((n, 3), np.nan)
    da = np.zeros(n)
    db = np.zeros(n)
    ok = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            p, depths = triangulate_rays(
                [pose_a, pose_b], [rays_a[i], rays_b[i]], min_angle=min_angle
            )
        except SfmFailure:
            continue
        if depths[0] <= 0 or depths[1] <= 0:
            continue
        points[i] = p
        da[i], db[i] = depths
        ok[i] = True
    return points, da, db, ok


def estimate_relative_pose(rays_a, rays_b, inlier_threshold=0.002, rng=None, ransac_iters=RANSAC_ITERS):
    """Relative pose of view b in view a's frame from matched unit rays.

    Random-sample 8-point fitting with angular epipolar residuals, followed
    by an all-inlier refit and cheirality disambiguation. The returned
    translation has unit norm. inlier_threshold is in radians (one pixel at
    focal length f is roughly 1/f).

    Returns (rotation, unit translation, inlier mask).
    Raises SfmFailure for < 8 matches, too few inliers, degenerate
    cheirality, or near-zero parallax (pure rotation).
    """
    rays_a = np.asarray(rays_a, dtype=float)
    rays_b = np.asarray(rays_b, dtype=float)
    n = len(rays_a)
    if n < MIN_EPIPOLAR_MATCHES:
        raise SfmFailure(f"need at least {MIN_EPIPOLAR_MATCHES} matches, got {n}")
    rng = np.random.default_rng(0) if rng is None else rng

    best_mask = None
    best_count = -1
    for _ in range(ransac_iters):
        idx = rng.choice(n, size=MIN_EPIPOLAR_MATCHES, replace=False)
        try:
            e_mat = _eight_point(rays_a[idx], rays_b[idx])
        except np.linalg.LinAlgError:
            continue
        mask = _epipolar_angles(e_mat, rays_a, rays_b) < inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < MIN_EPIPOLAR_MATCHES:
        raise SfmFailure(f"only {max(best_count, 0)} epipolar inliers")

    # refit on all inliers, then recollect the support set
    e_mat = _eight_point(rays_a[best_mask], rays_b[best_mask])
    mask = _epipolar_angles(e_mat, rays_a, rays_b) < inlier_threshold
    if int(mask.sum()) < MIN_EPIPOLAR_MATCHES:
        mask = best_mask
    e_mat = _eight_point(rays_a[mask], rays_b[mask])

    # a single rotation explaining the rays means the baseline is
    # unobservable (pure rotation); the essential fit is meaningless there
    rot_fit = _best_fit_rotation(rays_a[mask], rays_b[mask])
    fit_angles = _rotated_ray_angles(rot_fit, rays_a[mask], rays_b[mask])
    if float(np.median(fit_angles)) < max(LOW_PARALLAX_ANGLE, inlier_threshold):
        raise SfmFailure("low parallax: translation unobservable")

    best = None
    for rot_ba, t_ba in _decompose_essential(e_mat):
        # decomposition yields the a->b point transform; invert to the pose
        # of view b in view a's frame
        rot = rot_ba.T
        t = -rot_ba.T @ t_ba
        pose_a = Pose.identity()
        pose_b = Pose.from_rt(rot, t)
        _, da, db, ok = triangulate_pair(pose_a, pose_b, rays_a[mask], rays_b[mask])
        front = int(ok.sum())
        if best is None or front > best[0]:
            best = (front, rot, t)
    front, rot, t = best
    if front < max(2, 0.5 * mask.sum()):
        raise SfmFailure("cheirality check failed for all decompositions")

    return rot, t / np.linalg.norm(t), mask


def _rotated_ray_angles(rot, rays_a, rays_b):
    """Angle between R-transported b-rays and a-rays; ~0 under pure rotation."""
    aligned = rays_b @ rot.T
    dots = np.clip(np.einsum("ni,ni->n", aligned, rays_a), -1.0, 1.0)
    return np.arccos(np.abs(dots))


def _best_fit_rotation(rays_a, rays_b):
    """Rotation best aligning b-rays onto a-rays (orthogonal Procrustes)."""
    h = rays_a.T @ rays_b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _unit_ray_residual_jacobian(rot_wc, t_wc, points, rays):
    """Residuals r = normalize(X_cam) - ray and Jacobians wrt (dp, dtheta).

    Pose perturbation: t <- t + dp, R <- R @ exp(dtheta^). Returns
    (residuals (N,3), jac (N,3,6)).
    """
    x_cam = (points - t_wc) @ rot_wc  # = R^T (X - t)
    norms = np.linalg.norm(x_cam, axis=1, keepdims=True)
    unit = x_cam / norms
    res = unit - rays

    # d unit / d x_cam = (I - uu^T)/|x|
    eye = np.eye(3)[None, :, :]
    proj = (eye - unit[:, :, None] * unit[:, None, :]) / norms[:, :, None]
    # x_cam = R^T(X - t): d/dp = -R^T ; d/dtheta = [x_cam]^ (right perturbation)
    d_dp = -np.broadcast_to(rot_wc.T, (len(points), 3, 3))
    d_dth = np.zeros((len(points), 3, 3))
    d_dth[:, 0, 1] = -x_cam[:, 2]
    d_dth[:, 0, 2] = x_cam[:, 1]
    d_dth[:, 1, 0] = x_cam[:, 2]
    d_dth[:, 1, 2] = -x_cam[:, 0]
    d_dth[:, 2, 0] = -x_cam[:, 1]
    d_dth[:, 2, 1] = x_cam[:, 0]
    jac = np.concatenate([proj @ d_dp, proj @ d_dth], axis=2)
    return res, jac


def pnp_refine(points, rays, initial: Pose, max_iters=100, step_tol=1e-10, extrinsics=None,
               huber_delta=None):
    """Pose-only refinement of world_T_cam against 3D points and unit rays.

    Minimizes unit-ray direction residuals with damped least squares. When
    extrinsics (list of Pose, cam-in-body per observation) is given the
    optimized pose is world_T_body and each ray is taken in its own camera;
    this covers multi-camera pose verification with one code path.
    huber_delta (residual-norm units, roughly radians) bounds the influence
    of stray correspondences when set.

    Raises SfmFailure on fewer than 4 correspondences or divergence.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    rays = np.asarray(rays, dtype=float).reshape(-1, 3)
    if len(points) < 4:
        raise SfmFailure(f"pnp needs >= 4 correspondences, got {len(points)}")

    rot = initial.rotation
    t = initial.t.copy()
    lam = 1e-6

    def eval_all(rot_wb, t_wb):
        if extrinsics is None:
            return _unit_ray_residual_jacobian(rot_wb, t_wb, points, rays)
        groups = {}
        for i, ext in enumerate(extrinsics):
            groups.setdefault(id(ext), (ext, []))[1].append(i)
        res = np.zeros((len(points), 3))
        jac = np.zeros((len(points), 3, 6))
        for ext, idxs in groups.values():
            idxs = np.array(idxs)
            rot_wc = rot_wb @ ext.rotation
            t_wc = rot_wb @ ext.t + t_wb
            # x_cam = ext.R^T (R_wb^T (X - t_wb) - ext.t)
            x_cam = (points[idxs] - t_wc) @ rot_wc
            norms = np.linalg.norm(x_cam, axis=1, keepdims=True)
            unit = x_cam / norms
            res[idxs] = unit - rays[idxs]
            eye = np.eye(3)[None, :, :]
            proj = (eye - unit[:, :, None] * unit[:, None, :]) / norms[:, :, None]
            # body perturbation: t <- t + dp, R <- R exp(dtheta^)
            # d x_cam/dp = -(R_wb ext.R)^T ; d x_cam/dtheta = ext.R^T [y]^
            d_dp = -np.broadcast_to(rot_wc.T, (len(idxs), 3, 3))
            y = (points[idxs] - t_wb) @ rot_wb
            d_dth = np.zeros((len(idxs), 3, 3))
            d_dth[:, 0, 1] = -y[:, 2]
            d_dth[:, 0, 2] = y[:, 1]
            d_dth[:, 1, 0] = y[:, 2]
            d_dth[:, 1, 2] = -y[:, 0]
            d_dth[:, 2, 0] = -y[:, 1]
            d_dth[:, 2, 1] = y[:, 0]
            d_dth = np.einsum("ab,nbc->nac", ext.rotation.T, d_dth)
            jac[idxs] = np.concatenate([proj @ d_dp, proj @ d_dth], axis=2)
        return res, jac

    def robust(res, jac):
        if huber_delta is None:
            return res, jac, float((res**2).sum())
        norms = np.linalg.norm(res, axis=1)
        w = np.ones(len(res))
        far = norms > huber_delta
        w[far] = np.sqrt(huber_delta / norms[far])
        cost = float(
            np.sum(np.where(far, 2 * huber_delta * norms - huber_delta**2, norms**2))
        )
        return res * w[:, None], jac * w[:, None, None], cost

    res, jac = eval_all(rot, t)
    res, jac, cost = robust(res, jac)
    for _ in range(max_iters):
        j_flat = jac.reshape(-1, 6)
        r_flat = res.reshape(-1)
        h = j_flat.T @ j_flat
        g = j_flat.T @ r_flat
        step = None
        for _ in range(20):
            try:
                step = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_t = t + step[:3]
            new_rot = rot @ so3_exp(step[3:])
            new_res, new_jac = eval_all(new_rot, new_t)
            new_res, new_jac, new_cost = robust(new_res, new_jac)
            if new_cost <= cost:
                break
            lam *= 10.0
        else:
            raise SfmFailure("pnp diverged")
        t, rot = new_t, new_rot
        res, jac, cost = new_res, new_jac, new_cost
        lam = max(lam * 0.3, 1e-12)
        if np.linalg.norm(step) < step_tol:
            break
    else:
        raise SfmFailure("pnp did not converge in iteration budget")
    return Pose.from_rt(rot, t)


def _shared_rays(obs_a, obs_b):
    ids = sorted(set(obs_a) & set(obs_b))
    rays_a = np.array([obs_a[i] for i in ids]) if ids else np.zeros((0, 3))
    rays_b = np.array([obs_b[i] for i in ids]) if ids else np.zeros((0, 3))
    return ids, rays_a, rays_b


def monocular_sfm_window(ray_obs, camera_index=0, inlier_threshold=0.002, rng=None,
                         refine_passes=2, min_map_parallax=None):
    """Windowed monocular SfM from per-frame ray observations.

    ray_obs: list over frames of {track_id: unit ray}. Picks the frame pair
    with the widest rotation-compensated parallax, estimates a relative
    pose, triangulates, solves remaining frames by robust pose refinement,
    and re-anchors frame 0 at identity with unit-norm init baseline.

    Map points must subtend at least min_map_parallax (default 5x the
    inlier threshold: below that, triangulation is noise-dominated).

    Returns a CameraSfmTrajectory; raises SfmFailure when any stage fails.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n_frames = len(ray_obs)
    if n_frames < 2:
        raise SfmFailure("window too short")
    if min_map_parallax is None:
        min_map_parallax = 5.0 * inlier_threshold
    huber = 2.0 * inlier_threshold

    # rank frame pairs by rotation-compensated parallax: the residual ray
    # angle after the best-fit rotation is what triangulation actually sees
    pair_stats = []
    max_shared = 0
    for i in range(n_frames):
        for j in range(i + 1, n_frames):
            ids, ra, rb = _shared_rays(ray_obs[i], ray_obs[j])
            if len(ids) < MIN_EPIPOLAR_MATCHES:
                continue
            rot_fit = _best_fit_rotation(ra, rb)
            parallax = float(np.median(_rotated_ray_angles(rot_fit, ra, rb)))
            pair_stats.append((i, j, len(ids), parallax))
            max_shared = max(max_shared, len(ids))
    if not pair_stats:
        raise SfmFailure("no frame pair shares enough tracks")
    support_floor = max(MIN_EPIPOLAR_MATCHES, max_shared // 2)
    eligible = [p for p in pair_stats if p[2] >= support_floor]
    ia, ib, _, _ = max(eligible, key=lambda p: p[3])

    ids, ra, rb = _shared_rays(ray_obs[ia], ray_obs[ib])
    rot, t_unit, mask = estimate_relative_pose(ra, rb, inlier_threshold, rng)

    poses = [None] * n_frames
    poses[ia] = Pose.identity()
    poses[ib] = Pose.from_rt(rot, t_unit)

    points = {}
    pts, da, db, ok = triangulate_pair(
        poses[ia], poses[ib], ra, rb, min_angle=min_map_parallax
    )
    for k, tid in enumerate(ids):
        if mask[k] and ok[k]:
            points[tid] = pts[k]
    if len(points) < 4:
        raise SfmFailure("too few triangulated landmarks")

    def solve_frame(f, init_pose):
        shared = [tid for tid in ray_obs[f] if tid in points]
        if len(shared) < 4:
            raise SfmFailure(f"frame {f}: too few 2D-3D correspondences")
        pts3 = np.array([points[tid] for tid in shared])
        rays = np.array([ray_obs[f][tid] for tid in shared])
        return pnp_refine(pts3, rays, init_pose, huber_delta=huber)

    def grow_map(solved):
        # triangulate tracks that two or more solved frames now cover
        candidates = {
            tid for f in solved for tid in ray_obs[f] if tid not in points
        }
        for tid in sorted(candidates):
            obs_frames = [f for f in solved if tid in ray_obs[f]]
            if len(obs_frames) < 2:
                continue
            try:
                p, depths = triangulate_rays(
                    [poses[f] for f in obs_frames],
                    [ray_obs[f][tid] for f in obs_frames],
                    min_angle=min_map_parallax,
                )
            except SfmFailure:
                continue
            if np.all(depths > 0):
                points[tid] = p

    # sweep outward from the solved pair so each frame has a nearby initial
    solved = {ia, ib}
    order = sorted(range(n_frames), key=lambda f: min(abs(f - ia), abs(f - ib)))
    for f in order:
        if poses[f] is not None:
            continue
        neighbor = min(solved, key=lambda g: abs(g - f))
        poses[f] = solve_frame(f, poses[neighbor])
        solved.add(f)
        grow_map(solved)

    for _ in range(refine_passes):
        # retriangulate every track from all observing frames, then re-solve
        all_ids = sorted({tid for frame in ray_obs for tid in frame})
        points = {}
        for tid in all_ids:
            obs_frames = [f for f in range(n_frames) if tid in ray_obs[f]]
            if len(obs_frames) < 2:
                continue
            try:
                p, depths = triangulate_rays(
                    [poses[f] for f in obs_frames],
                    [ray_obs[f][tid] for f in obs_frames],
                    min_angle=min_map_parallax,
                )
            except SfmFailure:
                continue
            if np.all(depths > 0):
                points[tid] = p
        if len(points) < 4:
            raise SfmFailure("retriangulation lost the map")
        for f in range(n_frames):
            poses[f] = solve_frame(f, poses[f])

    anchor = poses[0].inverse()
    anchored = [anchor.compose(p) for p in poses]
    baseline = np.linalg.norm(anchored[ib].t - anchored[ia].t)
    if baseline < 1e-12:
        raise SfmFailure("degenerate baseline after anchoring")
    rotations = [p.rotation for p in anchored]
    translations = [p.t / baseline for p in anchored]
    translations[0] = np.zeros(3)
    return CameraSfmTrajectory(camera_index, rotations, translations)
