"""Trajectory-based auto-labeling: lift near-range 2D lane detections onto
a road surface spanned by the ego trajectory, accumulate them across
frames with a per-station Kalman line tracker, and emit per-frame local
3D labels.

The surface is piecewise planar: one plane per consecutive trajectory
pose pair, oriented by the vehicle's up vector, valid over its
along-track interval.  Detections are lifted by closed-form ray-plane
intersection.  Tracks store a filtered lateral offset per fixed
arclength station, so a line's world polyline is reconstructed from the
trajectory geometry plus the filtered offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .temporal import EgoPose, apply_transform

_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the camera-to-vehicle rigid transform.

    Camera axes: x right, y down, z forward (optical axis).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray
    width: int = 960
    height: int = 720

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        ext = np.asarray(self.extrinsic, dtype=float)
        if ext.shape != (4, 4):
            raise ValueError("extrinsic must be a 4x4 transform")
        r = ext[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("extrinsic rotation is not orthonormal")
        ext = ext.copy()
        ext.flags.writeable = False
        object.__setattr__(self, "extrinsic", ext)

    @classmethod
    def level_camera(cls, height_m: float = 1.5, fx: float = 1000.0, fy: float = 1000.0,
                     cx: float = 480.0, cy: float = 360.0, width: int = 960,
                     image_height: int = 720) -> "CameraModel":
        """Forward-looking camera at the given height above the vehicle origin."""
        ext = np.eye(4)
        # camera x -> vehicle x, camera y (down) -> -vehicle z, camera z (forward) -> vehicle y
        ext[:3, :3] = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
        ext[:3, 3] = [0.0, 0.0, height_m]
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, extrinsic=ext, width=width, height=image_height)

    def pixel_ray_vehicle(self, pixel) -> tuple[np.ndarray, np.ndarray]:
        """Ray (origin, unit direction) of a pixel, in vehicle coordinates."""
        u, v = float(pixel[0]), float(pixel[1])
        direction_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        origin = self.extrinsic[:3, 3]
        direction = self.extrinsic[:3, :3] @ direction_cam
        return origin, direction / np.linalg.norm(direction)

    def project_vehicle_points(self, points_vehicle: np.ndarray, min_depth: float = 0.1):
        """Project vehicle-frame points to pixels; returns (pixels, in_front mask)."""
        pts = np.asarray(points_vehicle, dtype=float)
        inv = np.eye(4)
        rt = self.extrinsic[:3, :3].T
        inv[:3, :3] = rt
        inv[:3, 3] = -rt @ self.extrinsic[:3, 3]
        cam = apply_transform(inv, pts)
        in_front = cam[:, 2] > min_depth
        depth = np.where(in_front, cam[:, 2], 1.0)
        u = self.cx + self.fx * cam[:, 0] / depth
        v = self.cy + self.fy * cam[:, 1] / depth
        return np.column_stack([u, v]), in_front


@dataclass
class Trajectory:
    """Timestamped ego poses along one sequence."""

    timestamps: np.ndarray
    poses: list[EgoPose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.poses) != self.timestamps.size:
            raise ValueError("one pose per timestamp required")
        if self.timestamps.size >= 2 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        positions = np.array([p.position for p in self.poses])
        if positions.shape[0] >= 2:
            if np.any(np.linalg.norm(np.diff(positions, axis=0), axis=1) < 1e-9):
                raise ValueError("consecutive trajectory positions must be distinct")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses])


@dataclass
class SurfaceModel:
    """Piecewise-planar road surface along a trajectory.

    Segment k spans the plane through positions k and k+1 with the
    in-plane frame (direction, lateral); `arclength[k]` is the
    along-track start of the segment.  Terminal segments extend their
    validity outward so near-range rays just past the trajectory ends
    still intersect.
    """

    origins: np.ndarray      # (segments, 3) start positions
    directions: np.ndarray   # (segments, 3) unit along-track
    laterals: np.ndarray     # (segments, 3) unit in-plane lateral (right-positive)
    normals: np.ndarray      # (segments, 3) unit plane normals
    lengths: np.ndarray      # (segments,)
    arclength: np.ndarray    # (segments + 1,) cumulative

    @property
    def segment_count(self) -> int:
        return self.origins.shape[0]

    def total_length(self) -> float:
        return float(self.arclength[-1])

    def station_frame(self, arclength: float):
        """(position, direction, lateral) of the surface point at an arclength."""
        s = float(arclength)
        k = int(np.clip(np.searchsorted(self.arclength, s, side="right") - 1, 0, self.segment_count - 1))
        t = s - self.arclength[k]
        return self.origins[k] + t * self.directions[k], self.directions[k], self.laterals[k]

    def locate(self, points: np.ndarray):
        """Project world points onto the trajectory: (arclength, lateral offset) per point.

        Uses the along-track parameter of the nearest segment, clamped
        to the segment span except at the trajectory ends, which extend
        linearly so look-ahead points keep a faithful decomposition.
        """
        pts = np.asarray(points, dtype=float)
        rel = pts[:, None, :] - self.origins[None, :, :]
        along = np.einsum("pkc,kc->pk", rel, self.directions)
        lo = np.zeros(self.segment_count)
        hi = self.lengths.copy()
        lo[0] = -np.inf
        hi[-1] = np.inf
        along_clamped = np.clip(along, lo[None, :], hi[None, :])
        closest = self.origins[None, :, :] + along_clamped[:, :, None] * self.directions[None, :, :]
        dist = np.linalg.norm(pts[:, None, :] - closest, axis=2)
        seg = np.argmin(dist, axis=1)
        idx = np.arange(pts.shape[0])
        lam = self.arclength[seg] + along_clamped[idx, seg]
        offset = np.einsum("pc,pc->p", rel[idx, seg], self.laterals[seg])
        return lam, offset


def build_surface(traj: Trajectory) -> SurfaceModel:
    """One plane per consecutive pose pair, oriented by the vehicle up vector.

    The plane normal is the component of the up vector orthogonal to the
    chord between the two positions, so both positions lie exactly in
    the plane.
    """
    if len(traj) < 2:
        raise ValueError("need at least 2 poses to build a surface")
    positions = traj.positions
    chords = np.diff(positions, axis=0)
    lengths = np.linalg.norm(chords, axis=1)
    if np.any(lengths < 1e-9):
        raise ValueError("duplicate consecutive trajectory positions")
    directions = chords / lengths[:, None]
    ups = np.array([p.rotation[:, 2] for p in traj.poses[:-1]])
    normals = ups - np.einsum("kc,kc->k", ups, directions)[:, None] * directions
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norm < 1e-9):
        raise ValueError("vehicle up vector parallel to travel direction")
    normals = normals / norm
    laterals = np.cross(directions, normals)
    laterals /= np.linalg.norm(laterals, axis=1, keepdims=True)
    arclength = np.concatenate([[0.0], np.cumsum(lengths)])
    return SurfaceModel(origins=positions[:-1], directions=directions, laterals=laterals,
                        normals=normals, lengths=lengths, arclength=arclength)


def _intersect_rays(surf: SurfaceModel, origins: np.ndarray, directions: np.ndarray):
    """Vectorized nearest valid ray-plane hit per ray; NaN rows where none exists.

    Validity means the hit's along-track parameter falls inside the
    segment span; the first and last segments extend outward.
    """
    o = np.atleast_2d(origins)
    d = np.atleast_2d(directions)
    denom = np.einsum("kc,rc->rk", surf.normals, d)
    rel = surf.origins[None, :, :] - o[:, None, :]
    numer = np.einsum("rkc,kc->rk", rel, surf.normals)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = numer / denom
    ok = (np.abs(denom) > _PARALLEL_EPS) & (t_hit > 1e-9)
    t_safe = np.where(np.isfinite(t_hit), t_hit, 0.0)
    hits = o[:, None, :] + t_safe[:, :, None] * d[:, None, :]
    along = np.einsum("rkc,kc->rk", hits - surf.origins[None, :, :], surf.directions)
    lo = np.zeros(surf.segment_count)
    hi = surf.lengths.copy()
    lo[0] = -np.inf
    hi[-1] = np.inf
    ok &= (along >= lo[None, :] - 1e-9) & (along <= hi[None, :] + 1e-9)
    t_valid = np.where(ok, t_hit, np.inf)
    best = np.argmin(t_valid, axis=1)
    rows = np.arange(o.shape[0])
    out = hits[rows, best]
    out[~np.isfinite(t_valid[rows, best])] = np.nan
    return out


def ray_surface_intersect(cam: CameraModel, pixel, pose: EgoPose, surf: SurfaceModel):
    """World point where a pixel's visual ray meets the surface, or None.

    The ray is cast from the camera center through the pixel; among the
    segments it crosses inside their validity interval, the nearest hit
    wins.  Rays clearing every plane (e.g. at the horizon) return None.
    """
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u <= cam.width and 0 <= v <= cam.height):
        raise ValueError(f"pixel ({u}, {v}) outside image bounds")
    origin_v, direction_v = cam.pixel_ray_vehicle(pixel)
    origin_w = apply_transform(pose.matrix, origin_v[None, :])[0]
    direction_w = pose.rotation @ direction_v
    hit = _intersect_rays(surf, origin_w[None, :], direction_w[None, :])[0]
    return None if np.any(np.isnan(hit)) else hit


def lift_detections(detections, cam: CameraModel, pose: EgoPose, surf: SurfaceModel,
                    near_range: float = 25.0):
    """Lift 2D polylines to world-frame 3D lines on the road surface.

    Each pixel is intersected with the surface; points farther ahead of
    the ego than `near_range` (vehicle-frame y) are discarded.  Returns
    (points (k, 3) in world frame, category) per detection; detections
    whose points all fall out of range come back empty.
    """
    inv_pose = pose.inverse_matrix()
    lifted = []
    for pixels, category in detections:
        pixels = np.asarray(pixels, dtype=float)
        if pixels.size == 0:
            lifted.append((np.zeros((0, 3)), category))
            continue
        dirs_cam = np.column_stack([
            (pixels[:, 0] - cam.cx) / cam.fx,
            (pixels[:, 1] - cam.cy) / cam.fy,
            np.ones(pixels.shape[0]),
        ])
        dirs_v = dirs_cam @ cam.extrinsic[:3, :3].T
        dirs_v /= np.linalg.norm(dirs_v, axis=1, keepdims=True)
        origins_w = np.tile(apply_transform(pose.matrix, cam.extrinsic[:3, 3][None, :]), (pixels.shape[0], 1))
        dirs_w = dirs_v @ pose.rotation.T
        hits = _intersect_rays(surf, origins_w, dirs_w)
        good = ~np.isnan(hits).any(axis=1)
        local = apply_transform(inv_pose, np.where(good[:, None], hits, 0.0))
        good &= local[:, 1] <= near_range
        good &= local[:, 1] > 0.0
        lifted.append((hits[good], category))
    return lifted


@dataclass
class Track:
    """One tracked line: filtered lateral offset and variance per station."""

    track_id: int
    offsets: np.ndarray      # (stations,), NaN where never observed
    variances: np.ndarray
    counts: np.ndarray       # observations per station
    category_votes: dict = field(default_factory=dict)
    hits: int = 0            # frames with an associated observation

    @property
    def category(self) -> int:
        if not self.category_votes:
            return 0
        best = max(sorted(self.category_votes), key=lambda c: self.category_votes[c])
        return best

    def observed(self) -> np.ndarray:
        return self.counts > 0


class LineTracker:
    """Kalman line tracker over fixed arclength stations.

    Lines are static, so the motion model is identity with a small
    process noise; each observed station runs an independent scalar
    filter on the lateral offset.  New observation groups that cannot be
    associated within the lateral gate spawn new tracks immediately; a
    track counts as mature once it has been associated `min_hits` times.
    """

    def __init__(self, surf: SurfaceModel, station_spacing: float = 2.0, gate: float = 1.0,
                 min_hits: int = 3, measurement_var: float = 0.01,
                 process_var: float = 1e-6, lead: float = 260.0):
        self.surf = surf
        self.spacing = station_spacing
        self.gate = gate
        self.min_hits = min_hits
        self.measurement_var = measurement_var
        self.process_var = process_var
        # stations cover the trajectory plus the look-ahead of the final frames
        self.stations = np.arange(0.0, surf.total_length() + lead + station_spacing, station_spacing)
        self.tracks: list[Track] = []
        self._next_id = 0

    def _station_measurements(self, points_world: np.ndarray):
        """Bin a line's points to stations; returns (station indices, mean offsets)."""
        lam, offset = self.surf.locate(points_world)
        idx = np.clip(np.round(lam / self.spacing).astype(int), 0, self.stations.size - 1)
        order = np.argsort(idx, kind="stable")
        idx, offset = idx[order], offset[order]
        uniq, start = np.unique(idx, return_index=True)
        means = np.add.reduceat(offset, start) / np.diff(np.append(start, offset.size))
        return uniq, means

    def _distance(self, track: Track, stations: np.ndarray, offsets: np.ndarray) -> float:
        common = track.counts[stations] > 0
        if not common.any():
            return np.inf
        return float(np.mean(np.abs(offsets[common] - track.offsets[stations[common]])))

    def step(self, lines) -> list[int]:
        """Associate and filter one frame's lifted lines; returns the track id per line."""
        assignments = []
        claimed = set()
        for points_world, category in lines:
            points_world = np.asarray(points_world, dtype=float)
            if points_world.shape[0] == 0:
                assignments.append(-1)
                continue
            stations, offsets = self._station_measurements(points_world)
            best, best_dist = None, self.gate
            for track in self.tracks:
                if track.track_id in claimed:
                    continue
                dist = self._distance(track, stations, offsets)
                if dist < best_dist:
                    best, best_dist = track, dist
            if best is None:
                best = Track(
                    track_id=self._next_id,
                    offsets=np.full(self.stations.size, np.nan),
                    variances=np.full(self.stations.size, np.inf),
                    counts=np.zeros(self.stations.size, dtype=int),
                )
                self._next_id += 1
                self.tracks.append(best)
            claimed.add(best.track_id)
            self._update(best, stations, offsets, category)
            assignments.append(best.track_id)
        return assignments

    def _update(self, track: Track, stations: np.ndarray, offsets: np.ndarray, category):
        fresh = np.isnan(track.offsets[stations])
        init = stations[fresh]
        track.offsets[init] = offsets[fresh]
        track.variances[init] = self.measurement_var
        seen = stations[~fresh]
        if seen.size:
            prior = track.variances[seen] + self.process_var
            gain = prior / (prior + self.measurement_var)
            track.offsets[seen] += gain * (offsets[~fresh] - track.offsets[seen])
            track.variances[seen] = (1.0 - gain) * prior
        track.counts[stations] += 1
        track.category_votes[int(category)] = track.category_votes.get(int(category), 0) + 1
        track.hits += 1

    def track_polyline(self, track: Track) -> np.ndarray:
        """World polyline of a track, reconstructed at its observed stations."""
        observed = np.flatnonzero(track.observed())
        points = np.empty((observed.size, 3))
        for i, s in enumerate(observed):
            pos, _, lateral = self.surf.station_frame(self.stations[s])
            points[i] = pos + track.offsets[s] * lateral
        return points

    def mature_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.hits >= self.min_hits]


def emit_frame_labels(tracker: LineTracker, pose: EgoPose, max_range: float = 250.0,
                      step: float = 2.0, min_points: int = 2):
    """Per-frame local labels: mature track polylines in the frame's ego coordinates.

    Polylines are clipped to [0, max_range] ahead of the ego and
    resampled at uniform local y.  Returns (lane_id, category,
    points (k, 4)) tuples with full visibility.
    """
    inv = pose.inverse_matrix()
    lanes = []
    for track in tracker.mature_tracks():
        world = tracker.track_polyline(track)
        if world.shape[0] < min_points:
            continue
        local = apply_transform(inv, world)
        inside = (local[:, 1] >= 0.0) & (local[:, 1] <= max_range)
        local = local[inside]
        if local.shape[0] < min_points:
            continue
        order = np.argsort(local[:, 1], kind="stable")
        local = local[order]
        y_lo, y_hi = local[0, 1], local[-1, 1]
        grid = np.arange(np.ceil(y_lo / step) * step, y_hi + 1e-9, step)
        if grid.size < min_points:
            continue
        x = np.interp(grid, local[:, 1], local[:, 0])
        z = np.interp(grid, local[:, 1], local[:, 2])
        points = np.column_stack([x, grid, z, np.ones_like(grid)])
        lanes.append((track.track_id, track.category, points))
    return lanes
