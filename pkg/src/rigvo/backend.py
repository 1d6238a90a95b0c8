"""Sliding-window bundle adjustment over body poses and inverse-depth
landmarks, with a marginalization prior, Huber robustification, and
per-camera online scale correction.

State layout: body poses for up to 11 frames plus landmarks parameterized
as an inverse range along a unit anchor ray in their first observing
camera. The oldest pose is held fixed as the gauge. Residuals are
normalized-plane reprojection errors whitened by an isotropic observation
covariance; points that land behind a camera are gated out per iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, matrix_to_quat, so3_exp, so3_log
from .scale import solve_single_scale
from .sfm import SfmFailure, pnp_refine

WINDOW_CAPACITY = 11
HUBER_DELTA = 1.0  # in observation standard deviations
Z_GATE = 1e-6
EIG_FLOOR = 1e-10
KEYFRAME_PARALLAX_PX = 10.0
KEYFRAME_TRACKED_RATIO = 0.5


@dataclass
class Landmark:
    camera: int
    track_id: int
    anchor_frame: int
    anchor_ray: np.ndarray  # unit 3-vector in the anchor camera frame
    inv_depth: float  # 1 / range along anchor_ray


@dataclass
class ReprojObservation:
    camera: int
    track_id: int
    frame: int
    coords: np.ndarray  # normalized image coordinates (x/z, y/z)
    sigma: float  # isotropic std on the normalized plane

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("observation coordinates must be finite")
        if self.sigma <= 0:
            raise ValueError("observation sigma must be positive")


@dataclass
class MarginalizationPrior:
    """Gaussian prior on retained poses from Schur-complemented states.

    Linearization points are first estimates: they stay fixed for the
    prior's lifetime. h is symmetric PSD with 6 rows per covered frame.
    """

    frames: list
    lin_rot: dict  # frame -> (3,3)
    lin_pos: dict  # frame -> (3,)
    h: np.ndarray
    b: np.ndarray
    constant: float = 0.0

    @property
    def dimension(self):
        return 6 * len(self.frames)

    def delta(self, poses):
        """Stacked [dp, dtheta] of current poses w.r.t. the lin points."""
        parts = []
        for f in self.frames:
            pose = poses[f]
            parts.append(pose.t - self.lin_pos[f])
            parts.append(so3_log(self.lin_rot[f].T @ pose.rotation))
        return np.concatenate(parts)

    def cost(self, poses):
        d = self.delta(poses)
        return float(0.5 * d @ self.h @ d + self.b @ d + self.constant)


class SlidingWindowState:
    def __init__(self, capacity=WINDOW_CAPACITY):
        self.capacity = capacity
        self.frames = []  # global frame indices, ascending
        self.poses = {}  # frame -> Pose, body in world
        self.timestamps = {}  # frame -> seconds
        self.landmarks = {}  # (camera, track_id) -> Landmark
        self.prior = None
        self.scales = None  # per-camera scale bookkeeping

    def add_frame(self, frame, pose, timestamp=None):
        if self.frames and frame <= self.frames[-1]:
            raise ValueError("frames must be added in increasing order")
        if len(self.frames) >= self.capacity:
            raise ValueError("window at capacity; marginalize or discard first")
        self.frames.append(frame)
        self.poses[frame] = pose
        self.timestamps[frame] = float(frame) if timestamp is None else timestamp

    def remove_frame(self, frame):
        self.frames.remove(frame)
        del self.poses[frame]
        self.timestamps.pop(frame, None)

    def copy(self):
        out = SlidingWindowState(self.capacity)
        out.frames = list(self.frames)
        out.poses = {f: p.copy() for f, p in self.poses.items()}
        out.timestamps = dict(self.timestamps)
        out.landmarks = {
            k: Landmark(l.camera, l.track_id, l.anchor_frame, l.anchor_ray.copy(), l.inv_depth)
            for k, l in self.landmarks.items()
        }
        out.prior = self.prior
        out.scales = None if self.scales is None else self.scales.copy()
        return out


def reprojection_residual(state: SlidingWindowState, obs: ReprojObservation, rig):
    """Residual and Jacobians for a single observation.

    Returns (residual (2,), j_anchor (2,6), j_target (2,6), j_depth (2,1))
    unwhitened, with pose perturbations [dp, dtheta] applied as
    t <- t + dp, R <- R exp(dtheta^). Returns None when the point falls
    behind the target camera (gated out). An observation at the anchor
    frame is identically zero for any depth.
    """
    lm = state.landmarks[(obs.camera, obs.track_id)]
    if obs.frame == lm.anchor_frame:
        return np.zeros(2), np.zeros((2, 6)), np.zeros((2, 6)), np.zeros((2, 1))
    prob = _Problem(state, [obs], rig)
    res, jac, valid = prob.evaluate_raw()
    if not valid[0]:
        return None
    return res[0], jac[0, :, 0:6], jac[0, :, 6:12], jac[0, :, 12:13]


class _Problem:
    """Batched residual/Jacobian evaluation over a window's observations."""

    def __init__(self, state, observations, rig, gauge="oldest"):
        self.state = state
        self.rig = rig
        frames = state.frames
        self.frame_slot = {f: i for i, f in enumerate(frames)}
        if gauge == "oldest":
            self.fixed_slots = {0} if frames else set()
        elif gauge == "none":
            self.fixed_slots = set()
        else:
            raise ValueError(f"unknown gauge {gauge!r}")
        self.free_slots = [i for i in range(len(frames)) if i not in self.fixed_slots]
        self.slot_col = {s: i for i, s in enumerate(self.free_slots)}

        usable = []
        lm_keys = []
        for o in observations:
            key = (o.camera, o.track_id)
            lm = state.landmarks.get(key)
            if lm is None or o.frame not in self.frame_slot:
                continue
            if lm.anchor_frame not in self.frame_slot:
                continue
            if o.frame == lm.anchor_frame:
                continue  # anchor self-observation: residual identically zero
            usable.append(o)
            lm_keys.append(key)
        self.observations = usable
        self.lm_order = sorted(set(lm_keys))
        lm_col = {k: i for i, k in enumerate(self.lm_order)}

        k = len(usable)
        self.a_slot = np.zeros(k, dtype=int)
        self.b_slot = np.zeros(k, dtype=int)
        self.cam = np.zeros(k, dtype=int)
        self.lm_idx = np.zeros(k, dtype=int)
        self.coords = np.zeros((k, 2))
        self.weight = np.zeros(k)
        for i, o in enumerate(usable):
            lm = state.landmarks[(o.camera, o.track_id)]
            self.a_slot[i] = self.frame_slot[lm.anchor_frame]
            self.b_slot[i] = self.frame_slot[o.frame]
            self.cam[i] = o.camera
            self.lm_idx[i] = lm_col[(o.camera, o.track_id)]
            self.coords[i] = o.coords
            self.weight[i] = 1.0 / o.sigma

        n_cams = rig.n_cameras
        self.ext_rot = np.stack(
            [rig.extrinsic(c).cam_in_body.rotation for c in range(n_cams)]
        )
        self.ext_t = np.stack([rig.extrinsic(c).cam_in_body.t for c in range(n_cams)])
        self.anchor_rays = (
            np.stack([state.landmarks[key].anchor_ray for key in self.lm_order])
            if self.lm_order
            else np.zeros((0, 3))
        )

    @property
    def n_pose_params(self):
        return 6 * len(self.free_slots)

    @property
    def n_landmarks(self):
        return len(self.lm_order)

    def current_values(self):
        rots = np.stack([self.state.poses[f].rotation for f in self.state.frames])
        pos = np.stack([self.state.poses[f].t for f in self.state.frames])
        lam = np.array(
            [self.state.landmarks[key].inv_depth for key in self.lm_order]
        )
        return rots, pos, lam

    def evaluate(self, rots, pos, lam):
        """Whitened residuals, stacked Jacobians (K,2,13), validity mask."""
        res, jac, valid = self._evaluate_core(rots, pos, lam)
        w = self.weight[:, None]
        return res * w, jac * w[:, :, None], valid

    def evaluate_raw(self):
        rots, pos, lam = self.current_values()
        return self._evaluate_core(rots, pos, lam)

    def _evaluate_core(self, rots, pos, lam):
        k = len(self.observations)
        if k == 0:
            return np.zeros((0, 2)), np.zeros((0, 2, 13)), np.zeros(0, dtype=bool)
        rays = self.anchor_rays[self.lm_idx]
        lam_k = lam[self.lm_idx]
        r_e = self.ext_rot[self.cam]
        t_e = self.ext_t[self.cam]
        r_a = rots[self.a_slot]
        p_a = pos[self.a_slot]
        r_b = rots[self.b_slot]
        p_b = pos[self.b_slot]

        p_ac = rays / lam_k[:, None]
        p_ab = np.einsum("kij,kj->ki", r_e, p_ac) + t_e
        p_w = np.einsum("kij,kj->ki", r_a, p_ab) + p_a
        p_bb = np.einsum("kji,kj->ki", r_b, p_w - p_b)
        p_c = np.einsum("kji,kj->ki", r_e, p_bb - t_e)

        z = p_c[:, 2]
        valid = z > Z_GATE
        z_safe = np.where(valid, z, 1.0)
        res = p_c[:, :2] / z_safe[:, None] - self.coords

        inv_z = 1.0 / z_safe
        dproj = np.zeros((k, 2, 3))
        dproj[:, 0, 0] = inv_z
        dproj[:, 1, 1] = inv_z
        dproj[:, 0, 2] = -p_c[:, 0] * inv_z**2
        dproj[:, 1, 2] = -p_c[:, 1] * inv_z**2

        # dP_c/dP_w = (R_b R_e)^T
        m = np.einsum("kij,kjl->kil", r_b, r_e).transpose(0, 2, 1)
        d_pw = np.einsum("kij,kjl->kil", dproj, m)  # (k,2,3)

        def cross_mat(v):
            out = np.zeros((k, 3, 3))
            out[:, 0, 1] = -v[:, 2]
            out[:, 0, 2] = v[:, 1]
            out[:, 1, 0] = v[:, 2]
            out[:, 1, 2] = -v[:, 0]
            out[:, 2, 0] = -v[:, 1]
            out[:, 2, 1] = v[:, 0]
            return out

        jac = np.zeros((k, 2, 13))
        # anchor pose: dP_w/dp = I, dP_w/dtheta = -R_a [P_ab]^
        jac[:, :, 0:3] = d_pw
        jac[:, :, 3:6] = -np.einsum(
            "kij,kjl,klm->kim", d_pw, r_a, cross_mat(p_ab)
        )
        # target pose: dP_c/dp_b = -(R_b R_e)^T, dP_c/dtheta_b = R_e^T [P_bb]^
        jac[:, :, 6:9] = -d_pw
        jac[:, :, 9:12] = np.einsum(
            "kij,kjl,klm->kim", dproj, r_e.transpose(0, 2, 1), cross_mat(p_bb)
        )
        # inverse depth: dP_ac/dlambda = -ray/lambda^2
        r_total = np.einsum("kij,kjl->kil", m, np.einsum("kij,kjl->kil", r_a, r_e))
        d_ray = -rays / (lam_k**2)[:, None]
        jac[:, :, 12] = np.einsum("kij,kjl,kl->ki", dproj, r_total, d_ray)

        res[~valid] = 0.0
        jac[~valid] = 0.0
        return res, jac, valid


def _huber_weights(res, delta=HUBER_DELTA):
    """Per-observation sqrt IRLS weight and robust cost (whitened input)."""
    e = np.linalg.norm(res, axis=1)
    w = np.ones_like(e)
    if not np.isfinite(delta):
        return w, float((e**2).sum())
    mask = e > delta
    w[mask] = np.sqrt(delta / e[mask])
    cost = np.where(mask, 2.0 * delta * e - delta**2, e**2)
    return w, float(cost.sum())


def _assemble(prob, res, jac, valid, hw):
    """Normal-equation blocks with landmarks kept separable.

    Returns (h_pp, h_pl, h_ll diag, g_p, g_l).
    """
    np_params = prob.n_pose_params
    n_lm = prob.n_landmarks
    h_pp = np.zeros((np_params, np_params))
    h_pl = np.zeros((np_params, n_lm))
    h_ll = np.zeros(n_lm)
    g_p = np.zeros(np_params)
    g_l = np.zeros(n_lm)
    if len(res) == 0:
        return h_pp, h_pl, h_ll, g_p, g_l

    r = res * hw[:, None]
    j = jac * hw[:, None, None]
    blocks = np.einsum("kri,krj->kij", j, j)  # (K,13,13)
    grads = np.einsum("kri,kr->ki", j, r)  # (K,13)

    a_col = np.array([prob.slot_col.get(s, -1) for s in prob.a_slot])
    b_col = np.array([prob.slot_col.get(s, -1) for s in prob.b_slot])
    lm = prob.lm_idx

    def scatter_pose_pose(cols_i, cols_j, block):
        mask = (cols_i >= 0) & (cols_j >= 0)
        if not mask.any():
            return
        rows = (6 * cols_i[mask, None] + np.arange(6)[None, :])[:, :, None]
        cols = (6 * cols_j[mask, None] + np.arange(6)[None, :])[:, None, :]
        flat = (rows * np_params + cols).reshape(-1)
        h_pp.reshape(-1)[:] += np.bincount(
            flat, weights=block[mask].reshape(-1), minlength=np_params**2
        )

    def scatter_pose_lm(cols_i, block):
        mask = cols_i >= 0
        if not mask.any():
            return
        rows = 6 * cols_i[mask, None] + np.arange(6)[None, :]
        flat = (rows * n_lm + lm[mask, None]).reshape(-1)
        h_pl.reshape(-1)[:] += np.bincount(
            flat, weights=block[mask].reshape(-1), minlength=np_params * n_lm
        )

    def scatter_grad(cols_i, vals):
        mask = cols_i >= 0
        if not mask.any():
            return
        rows = (6 * cols_i[mask, None] + np.arange(6)[None, :]).reshape(-1)
        g_p[:] += np.bincount(rows, weights=vals[mask].reshape(-1), minlength=np_params)

    scatter_pose_pose(a_col, a_col, blocks[:, 0:6, 0:6])
    scatter_pose_pose(a_col, b_col, blocks[:, 0:6, 6:12])
    scatter_pose_pose(b_col, a_col, blocks[:, 6:12, 0:6])
    scatter_pose_pose(b_col, b_col, blocks[:, 6:12, 6:12])
    scatter_pose_lm(a_col, blocks[:, 0:6, 12])
    scatter_pose_lm(b_col, blocks[:, 6:12, 12])
    h_ll[:] = np.bincount(lm, weights=blocks[:, 12, 12], minlength=n_lm)
    scatter_grad(a_col, grads[:, 0:6])
    scatter_grad(b_col, grads[:, 6:12])
    g_l[:] = np.bincount(lm, weights=grads[:, 12], minlength=n_lm)
    return h_pp, h_pl, h_ll, g_p, g_l


def _prior_terms(prob, prior):
    """Prior gradient/Hessian mapped onto the free pose parameters."""
    np_params = prob.n_pose_params
    h_out = np.zeros((np_params, np_params))
    g_out = np.zeros(np_params)
    if prior is None:
        return h_out, g_out, 0.0
    delta = prior.delta(prob.state.poses)
    grad_full = prior.h @ delta + prior.b
    cols = {}
    for i, f in enumerate(prior.frames):
        slot = prob.frame_slot.get(f)
        if slot is not None and slot in prob.slot_col:
            cols[i] = prob.slot_col[slot]
    for i, ci in cols.items():
        g_out[6 * ci : 6 * ci + 6] += grad_full[6 * i : 6 * i + 6]
        for j, cj in cols.items():
            h_out[6 * ci : 6 * ci + 6, 6 * cj : 6 * cj + 6] += prior.h[
                6 * i : 6 * i + 6, 6 * j : 6 * j + 6
            ]
    cost = float(0.5 * delta @ prior.h @ delta + prior.b @ delta + prior.constant)
    return h_out, g_out, cost


def optimize_window(state: SlidingWindowState, observations, rig, max_iters=10,
                    step_tol=1e-8, robust=True):
    """Trust-region damped Gauss-Newton over the window.

    Landmarks are eliminated per iteration through their diagonal block;
    the oldest pose is the gauge. Steps that raise the cost or drive any
    inverse depth non-positive are rejected and the damping increased.
    robust=False drops the Huber loss (plain least squares), for paired
    robustness comparisons. Returns an info dict with the accepted-cost
    trace and status.
    """
    prob = _Problem(state, observations, rig)
    rots, pos, lam = prob.current_values()

    delta_huber = HUBER_DELTA if robust else np.inf

    def total_cost(rots_c, pos_c, lam_c):
        res, _, valid = prob.evaluate(rots_c, pos_c, lam_c)
        _, obs_cost = _huber_weights(res[valid], delta_huber)
        prior_cost = 0.0
        if state.prior is not None:
            poses = {
                f: Pose.from_rt(rots_c[prob.frame_slot[f]], pos_c[prob.frame_slot[f]])
                for f in state.frames
            }
            prior_cost = state.prior.cost(poses)
        return obs_cost + prior_cost

    cost = total_cost(rots, pos, lam)
    trace = [cost]
    lam_damp = 1e-4
    status = "converged"
    consecutive_rejects = 0

    for _ in range(max_iters):
        res, jac, valid = prob.evaluate(rots, pos, lam)
        hw, _ = _huber_weights(res, delta_huber)
        hw[~valid] = 0.0
        h_pp, h_pl, h_ll, g_p, g_l = _assemble(prob, res, jac, valid, hw)
        h_prior, g_prior, _ = _prior_terms(prob, state.prior)
        h_pp += h_prior
        g_p += g_prior

        accepted = False
        for _ in range(8):
            d_pp = h_pp + lam_damp * np.diag(np.maximum(np.diag(h_pp), 1e-12))
            d_ll = h_ll * (1.0 + lam_damp) + 1e-12
            # Schur-complement the landmark block
            hpl_dinv = h_pl / d_ll[None, :]
            s_mat = d_pp - hpl_dinv @ h_pl.T
            rhs = -g_p + hpl_dinv @ g_l
            try:
                step_p = np.linalg.solve(s_mat, rhs)
            except np.linalg.LinAlgError:
                lam_damp *= 10.0
                continue
            step_l = -(g_l + h_pl.T @ step_p) / d_ll

            new_lam = lam + step_l
            if np.any(new_lam <= 0):
                lam_damp *= 10.0
                consecutive_rejects += 1
                continue
            new_rots = rots.copy()
            new_pos = pos.copy()
            for slot, col in prob.slot_col.items():
                dp = step_p[6 * col : 6 * col + 3]
                dth = step_p[6 * col + 3 : 6 * col + 6]
                new_pos[slot] = pos[slot] + dp
                new_rots[slot] = rots[slot] @ so3_exp(dth)
            new_cost = total_cost(new_rots, new_pos, new_lam)
            if new_cost <= cost + 1e-15:
                accepted = True
                break
            lam_damp *= 10.0
            consecutive_rejects += 1
            if consecutive_rejects >= 5:
                break

        if not accepted:
            status = "converged_with_warning" if consecutive_rejects >= 5 else "stalled"
            break
        consecutive_rejects = 0
        rots, pos, lam = new_rots, new_pos, new_lam
        cost = new_cost
        trace.append(cost)
        lam_damp = max(lam_damp * 0.3, 1e-8)
        if np.linalg.norm(np.concatenate([step_p, step_l])) < step_tol:
            break

    for f, slot in prob.frame_slot.items():
        state.poses[f] = Pose.from_rt(rots[slot], pos[slot])
    for key, col in zip(prob.lm_order, range(prob.n_landmarks)):
        state.landmarks[key].inv_depth = float(lam[col])
    return {"cost_trace": trace, "status": status, "n_obs": len(prob.observations)}


def marginalize_oldest(state: SlidingWindowState, observations, rig):
    """Schur-complement the oldest pose and its anchored landmarks into a
    Gaussian prior on the retained poses (first-estimate Jacobians).

    Mutates the state (drops the pose and those landmarks) and installs the
    new prior. Returns the prior.
    """
    if not state.frames:
        raise ValueError("empty window")
    f0 = state.frames[0]
    marg_keys = {
        key for key, lm in state.landmarks.items() if lm.anchor_frame == f0
    }
    factors = [
        o
        for o in observations
        if (o.camera, o.track_id) in marg_keys and o.frame in state.poses
    ]

    # evaluate those factors with every pose free (no gauge here)
    prob = _Problem(state, factors, rig, gauge="none")
    rots, pos, lam = prob.current_values()
    res, jac, valid = prob.evaluate(rots, pos, lam)
    hw, _ = _huber_weights(res)
    hw[~valid] = 0.0
    h_pp, h_pl, h_ll, g_p, g_l = _assemble(prob, res, jac, valid, hw)

    n_poses = len(state.frames)
    n_lm = prob.n_landmarks
    dim = 6 * n_poses + n_lm
    h = np.zeros((dim, dim))
    b = np.zeros(dim)
    h[: 6 * n_poses, : 6 * n_poses] = h_pp
    h[: 6 * n_poses, 6 * n_poses :] = h_pl
    h[6 * n_poses :, : 6 * n_poses] = h_pl.T
    h[6 * n_poses :, 6 * n_poses :] = np.diag(h_ll)
    b[: 6 * n_poses] = g_p
    b[6 * n_poses :] = g_l

    # fold in the previous prior about the current estimates
    if state.prior is not None:
        prev = state.prior
        delta = prev.delta(state.poses)
        b_shift = prev.h @ delta + prev.b
        for i, fi in enumerate(prev.frames):
            si = state.frames.index(fi)
            b[6 * si : 6 * si + 6] += b_shift[6 * i : 6 * i + 6]
            for j, fj in enumerate(prev.frames):
                sj = state.frames.index(fj)
                h[6 * si : 6 * si + 6, 6 * sj : 6 * sj + 6] += prev.h[
                    6 * i : 6 * i + 6, 6 * j : 6 * j + 6
                ]

    removed = list(range(6)) + [6 * n_poses + i for i in range(n_lm)]
    retained = [i for i in range(dim) if i not in removed]
    h_rr = h[np.ix_(removed, removed)]
    h_rk = h[np.ix_(removed, retained)]
    h_kk = h[np.ix_(retained, retained)]
    b_r = b[removed]
    b_k = b[retained]

    vals, vecs = np.linalg.eigh(0.5 * (h_rr + h_rr.T))
    floored = vals > EIG_FLOOR
    diagnostics = None
    if not floored.all():
        diagnostics = (
            f"marginalization: {int((~floored).sum())} eigenvalues below floor, "
            "pseudo-inverse applied"
        )
    inv_vals = np.where(floored, 1.0 / np.where(floored, vals, 1.0), 0.0)
    h_rr_inv = (vecs * inv_vals[None, :]) @ vecs.T

    h_new = h_kk - h_rk.T @ h_rr_inv @ h_rk
    b_new = b_k - h_rk.T @ h_rr_inv @ b_r
    h_new = 0.5 * (h_new + h_new.T)

    retained_frames = state.frames[1:]
    prior = MarginalizationPrior(
        frames=list(retained_frames),
        lin_rot={f: state.poses[f].rotation for f in retained_frames},
        lin_pos={f: state.poses[f].t.copy() for f in retained_frames},
        h=h_new,
        b=b_new,
    )
    if diagnostics:
        prior.diagnostic = diagnostics

    for key in marg_keys:
        del state.landmarks[key]
    state.remove_frame(f0)
    state.prior = prior
    return prior


def discard_second_newest(state: SlidingWindowState, observations, rig):
    """Drop the second-newest pose; its observations never enter the prior.

    Landmarks anchored there are re-anchored to their next observation. If
    an existing prior covers the dropped pose, that block is marginalized
    out of the prior itself (the pose carried no new observation info).
    """
    if len(state.frames) < 2:
        raise ValueError("need at least two frames")
    f_drop = state.frames[-2]

    obs_by_lm = {}
    for o in observations:
        obs_by_lm.setdefault((o.camera, o.track_id), []).append(o)

    dropped = []
    for key, lm in list(state.landmarks.items()):
        if lm.anchor_frame != f_drop:
            continue
        ext = rig.extrinsic(lm.camera).cam_in_body
        future = sorted(
            (o for o in obs_by_lm.get(key, []) if o.frame > f_drop and o.frame in state.poses),
            key=lambda o: o.frame,
        )
        re_anchored = False
        for nxt in future:
            old_cam_pose = state.poses[f_drop].compose(ext)
            point_w = old_cam_pose.apply(lm.anchor_ray / lm.inv_depth)
            new_cam_pose = state.poses[nxt.frame].compose(ext)
            p_cam = new_cam_pose.rotation.T @ (point_w - new_cam_pose.t)
            rng = np.linalg.norm(p_cam)
            if rng < 1e-9 or p_cam[2] <= Z_GATE:
                continue
            ray = np.array([nxt.coords[0], nxt.coords[1], 1.0])
            lm.anchor_ray = ray / np.linalg.norm(ray)
            lm.anchor_frame = nxt.frame
            lm.inv_depth = 1.0 / rng
            re_anchored = True
            break
        if not re_anchored:
            dropped.append(key)
    for key in dropped:
        del state.landmarks[key]

    if state.prior is not None and f_drop in state.prior.frames:
        state.prior = _prior_without_frame(state.prior, f_drop)
    state.remove_frame(f_drop)


def _prior_without_frame(prior: MarginalizationPrior, frame):
    """Schur-complement one pose block out of a prior."""
    idx = prior.frames.index(frame)
    removed = list(range(6 * idx, 6 * idx + 6))
    retained = [i for i in range(prior.dimension) if i not in removed]
    h_rr = prior.h[np.ix_(removed, removed)]
    h_rk = prior.h[np.ix_(removed, retained)]
    h_kk = prior.h[np.ix_(retained, retained)]
    vals, vecs = np.linalg.eigh(0.5 * (h_rr + h_rr.T))
    inv_vals = np.where(vals > EIG_FLOOR, 1.0 / np.where(vals > EIG_FLOOR, vals, 1.0), 0.0)
    h_rr_inv = (vecs * inv_vals[None, :]) @ vecs.T
    h_new = h_kk - h_rk.T @ h_rr_inv @ h_rk
    b_new = prior.h[np.ix_(retained, removed)] @ (h_rr_inv @ prior.b[removed])
    b_new = prior.b[retained] - b_new
    frames = [f for f in prior.frames if f != frame]
    return MarginalizationPrior(
        frames=frames,
        lin_rot={f: prior.lin_rot[f] for f in frames},
        lin_pos={f: prior.lin_pos[f] for f in frames},
        h=0.5 * (h_new + h_new.T),
        b=b_new,
        constant=prior.constant,
    )


def keyframe_decision(window_parallax_px, tracked_ratio):
    """Windowing policy: absorb the oldest frame or drop the second newest."""
    if window_parallax_px > KEYFRAME_PARALLAX_PX or tracked_ratio < KEYFRAME_TRACKED_RATIO:
        return "marginalize_oldest"
    return "discard_second_newest"


def prune_landmarks(state: SlidingWindowState, observations, min_obs=2):
    """Drop landmarks with fewer than min_obs in-window observations."""
    counts = {}
    for o in observations:
        if o.frame in state.poses:
            counts[(o.camera, o.track_id)] = counts.get((o.camera, o.track_id), 0) + 1
    for key in list(state.landmarks):
        if counts.get(key, 0) < min_obs:
            del state.landmarks[key]


def correct_scale(state: SlidingWindowState, observations, rig, min_frame_obs=4):
    """Per-camera residual scale estimation and inverse-depth correction.

    For each camera, a camera-only trajectory is re-estimated over the
    window by pose-only refinement against that camera's landmarks with
    depths held fixed. Comparing it (through the extrinsic, re-anchored)
    with the fused body trajectory gives a single residual scale s_hat per
    camera; the camera's inverse depths are divided by s_hat. Body poses
    are untouched: rectification propagates through later optimization.

    Returns {camera: s_hat} for the cameras that were corrected.
    """
    frames = state.frames
    if len(frames) < 3:
        return {}

    obs_by_cam_frame = {}
    for o in observations:
        if o.frame in state.poses and (o.camera, o.track_id) in state.landmarks:
            obs_by_cam_frame.setdefault((o.camera, o.frame), []).append(o)

    applied = {}
    for c in range(rig.n_cameras):
        ext = rig.extrinsic(c).cam_in_body
        r_ext = ext.rotation
        t_ext = ext.t

        # landmark world points from the current state (depths fixed)
        world_points = {}
        for key, lm in state.landmarks.items():
            if lm.camera != c or lm.anchor_frame not in state.poses:
                continue
            anchor_cam = state.poses[lm.anchor_frame].compose(ext)
            world_points[key] = anchor_cam.apply(lm.anchor_ray / lm.inv_depth)
        if len(world_points) < min_frame_obs:
            continue

        cam_poses = {}
        for f in frames:
            obs_f = [
                o for o in obs_by_cam_frame.get((c, f), [])
                if (o.camera, o.track_id) in world_points
            ]
            if len(obs_f) < min_frame_obs:
                continue
            pts = np.array([world_points[(o.camera, o.track_id)] for o in obs_f])
            rays = np.array(
                [_coords_to_ray(o.coords) for o in obs_f]
            )
            init = state.poses[f].compose(ext)
            try:
                cam_poses[f] = pnp_refine(pts, rays, init, max_iters=30)
            except SfmFailure:
                continue
        solved = sorted(cam_poses)
        if len(solved) < 3:
            continue

        t0 = solved[0]
        cam_anchor_inv = cam_poses[t0].inverse()
        body_anchor_inv = state.poses[t0].inverse()
        coeffs, targets = [], []
        for f in solved[1:]:
            rel_cam = cam_anchor_inv.compose(cam_poses[f])
            rel_body = body_anchor_inv.compose(state.poses[f])
            rot_c = rel_cam.rotation
            offset = t_ext - r_ext @ rot_c @ r_ext.T @ t_ext
            coeffs.append(r_ext @ rel_cam.t)
            targets.append(rel_body.t - offset)
        s_hat, _, denom = solve_single_scale(coeffs, targets)
        if denom < 1e-10 or s_hat <= 0:
            continue
        for key, lm in state.landmarks.items():
            if lm.camera == c:
                lm.inv_depth /= s_hat
        applied[c] = s_hat
    return applied


def _coords_to_ray(coords):
    ray = np.array([coords[0], coords[1], 1.0])
    return ray / np.linalg.norm(ray)
