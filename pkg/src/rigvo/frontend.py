"""Feature bookkeeping: track tables, the 3-priority quadtree selector,
parallax statistics, and the spatial feature distribution metric.

Frame indices are global and strictly increasing; a track never spans
cameras. Parallax windows are given as an interval span: a span of 10
covers 11 consecutive frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_CELL_SIDE = 8.0  # px, quadtree split floor
DEFAULT_SUPPRESSION_RADIUS = 10.0  # px
DEFAULT_SFD_GRID = 8


@dataclass
class FeatureCandidate:
    pixel: np.ndarray  # (2,) px
    score: float


@dataclass
class TrackedFeature:
    id: int
    pixel: np.ndarray  # (2,) px
    age: int = 1


class FeatureTrackTable:
    """Per-camera feature tracks keyed by track id.

    tracks[cam][tid] is a list of (frame_index, pixel) with strictly
    increasing frame indices.
    """

    def __init__(self, n_cameras):
        self.n_cameras = n_cameras
        self.tracks = [{} for _ in range(n_cameras)]
        self.last_frame = None
        self.diagnostics = []

    def observations_at(self, cam, frame):
        """List of (track_id, pixel) observed by a camera at a frame."""
        out = []
        for tid, obs in self.tracks[cam].items():
            for f, pix in obs:
                if f == frame:
                    out.append((tid, pix))
                    break
                if f > frame:
                    break
        out.sort(key=lambda item: item[0])
        return out

    def track_pixels(self, cam, tid):
        return self.tracks[cam][tid]

    def lifespan(self, cam, tid):
        return len(self.tracks[cam][tid])

    def frames(self):
        if self.last_frame is None:
            return []
        first = self.last_frame
        for cam_tracks in self.tracks:
            for obs in cam_tracks.values():
                if obs and obs[0][0] < first:
                    first = obs[0][0]
        return list(range(first, self.last_frame + 1))

    def window_parallax(self, cam, span, end_frame=None):
        """Mean endpoint pixel displacement of tracks alive across the span.

        Considers tracks observed at both end_frame - span and end_frame;
        returns 0.0 when no track covers the span.
        """
        end = self.last_frame if end_frame is None else end_frame
        if end is None:
            return 0.0
        start = end - span
        disps = []
        for obs in self.tracks[cam].values():
            by_frame = {f: pix for f, pix in obs}
            if start in by_frame and end in by_frame:
                disps.append(np.linalg.norm(by_frame[end] - by_frame[start]))
        return float(np.mean(disps)) if disps else 0.0


def update_track_table(table: FeatureTrackTable, frame_index, per_camera_obs, window_span=10):
    """Ingest one frame of observations; returns per-camera mean parallax.

    per_camera_obs: for each camera, an iterable of (track_id, pixel).
    The returned parallax is the mean per-frame pixel displacement of
    tracks alive across the trailing window (endpoint displacement divided
    by the covered span). Duplicate ids within one camera frame are
    rejected with a diagnostic; the first occurrence is kept.
    """
    if table.last_frame is not None and frame_index != table.last_frame + 1:
        raise ValueError(
            f"frame_index {frame_index} does not follow last index {table.last_frame}"
        )
    if len(per_camera_obs) != table.n_cameras:
        raise ValueError("observation list does not match camera count")

    for cam, obs_list in enumerate(per_camera_obs):
        seen = set()
        for tid, pixel in obs_list:
            if tid in seen:
                table.diagnostics.append(
                    f"frame {frame_index} cam {cam}: duplicate track id {tid} rejected"
                )
                continue
            seen.add(tid)
            pix = np.asarray(pixel, dtype=float)
            track = table.tracks[cam].setdefault(tid, [])
            if track and track[-1][0] >= frame_index:
                table.diagnostics.append(
                    f"frame {frame_index} cam {cam}: non-increasing frame for track {tid}"
                )
                continue
            track.append((frame_index, pix))

    table.last_frame = frame_index

    parallax = []
    for cam in range(table.n_cameras):
        first = frame_index
        for obs in table.tracks[cam].values():
            if obs:
                first = min(first, obs[0][0])
        span = min(window_span, frame_index - first)
        if span <= 0:
            parallax.append(0.0)
            continue
        total = table.window_parallax(cam, span, frame_index)
        parallax.append(total / span)
    return parallax


def track_stability(table: FeatureTrackTable, cam, window):
    """Mean in-window track lifespan; the principal-camera ranking statistic.

    window: inclusive (start_frame, end_frame).
    """
    start, end = window
    lifespans = []
    for obs in table.tracks[cam].values():
        count = sum(1 for f, _ in obs if start <= f <= end)
        if count > 0:
            lifespans.append(count)
    return float(np.mean(lifespans)) if lifespans else 0.0


def _morton(gx, gy):
    code = 0
    for bit in range(16):
        code |= ((gx >> bit) & 1) << (2 * bit)
        code |= ((gy >> bit) & 1) << (2 * bit + 1)
    return code


class _Cell:
    __slots__ = ("x0", "y0", "w", "h", "gx", "gy", "depth", "tracked", "cands")

    def __init__(self, x0, y0, w, h, gx, gy, depth, tracked, cands):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.gx, self.gy, self.depth = gx, gy, depth
        self.tracked = tracked
        self.cands = cands

    @property
    def count(self):
        return len(self.tracked) + len(self.cands)

    def z_key(self):
        shift = 16 - self.depth
        return _morton(self.gx << shift, self.gy << shift)

    def splittable(self):
        return self.count > 1 and min(self.w, self.h) / 2.0 >= MIN_CELL_SIDE


def select_features_3priority(
    tracked,
    candidates,
    bounds,
    target_count,
    suppression_radius=DEFAULT_SUPPRESSION_RADIUS,
):
    """Spatially uniform candidate selection over a quadtree.

    Priority rules: cells with more features are split first; candidates
    near tracked features are suppressed; the highest-score survivor wins
    its cell. Returns at most target_count candidates, deterministically
    (ties by z-order of cell origin, then lowest candidate index).

    bounds: (x0, y0, width, height) image rect.
    """
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    if suppression_radius < 0:
        raise ValueError("suppression_radius must be non-negative")
    if not candidates:
        return []

    x0, y0, width, height = bounds
    cand_px = np.array([np.asarray(c.pixel, dtype=float) for c in candidates])
    tracked_px = (
        np.array([np.asarray(t.pixel, dtype=float) for t in tracked])
        if tracked
        else np.zeros((0, 2))
    )

    # candidates inside the suppression radius of any tracked feature are out
    if len(tracked_px) and suppression_radius > 0:
        d2 = ((cand_px[:, None, :] - tracked_px[None, :, :]) ** 2).sum(axis=2)
        suppressed = (d2 < suppression_radius**2).any(axis=1)
    else:
        suppressed = np.zeros(len(candidates), dtype=bool)

    root = _Cell(
        x0, y0, float(width), float(height), 0, 0, 0,
        list(range(len(tracked_px))), list(range(len(candidates))),
    )
    leaves = [root]

    def split_order(cell):
        return (-cell.count, cell.z_key())

    while len(leaves) < target_count:
        splittable = [c for c in leaves if c.splittable()]
        if not splittable:
            break
        cell = min(splittable, key=split_order)
        leaves.remove(cell)
        hw, hh = cell.w / 2.0, cell.h / 2.0
        for dy in (0, 1):
            for dx in (0, 1):
                cx0, cy0 = cell.x0 + dx * hw, cell.y0 + dy * hh
                in_tracked = [
                    i
                    for i in cell.tracked
                    if cx0 <= tracked_px[i, 0] < cx0 + hw + (1e-9 if dx else 0)
                    and cy0 <= tracked_px[i, 1] < cy0 + hh + (1e-9 if dy else 0)
                ]
                in_cands = [
                    i
                    for i in cell.cands
                    if cx0 <= cand_px[i, 0] < cx0 + hw + (1e-9 if dx else 0)
                    and cy0 <= cand_px[i, 1] < cy0 + hh + (1e-9 if dy else 0)
                ]
                if in_tracked or in_cands:
                    leaves.append(
                        _Cell(
                            cx0, cy0, hw, hh,
                            cell.gx * 2 + dx, cell.gy * 2 + dy, cell.depth + 1,
                            in_tracked, in_cands,
                        )
                    )

    selected = []
    for cell in sorted(leaves, key=split_order):
        if cell.tracked:
            continue
        survivors = [i for i in cell.cands if not suppressed[i]]
        if not survivors:
            continue
        best = min(survivors, key=lambda i: (-candidates[i].score, i))
        selected.append(best)
        if len(selected) == target_count:
            break
    return [candidates[i] for i in selected]


def compute_sfd(features, bounds, grid=DEFAULT_SFD_GRID):
    """Variance of per-cell feature counts over a grid x grid partition."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    x0, y0, width, height = bounds
    counts = np.zeros((grid, grid))
    for pix in features:
        gx = int((pix[0] - x0) / width * grid)
        gy = int((pix[1] - y0) / height * grid)
        gx = min(max(gx, 0), grid - 1)
        gy = min(max(gy, 0), grid - 1)
        counts[gy, gx] += 1
    return float(np.var(counts))


def select_features_score_only(candidates, target_count):
    """Baseline selector: top-K by score, ties by lowest index."""
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].score, i))
    return [candidates[i] for i in order[:target_count]]
