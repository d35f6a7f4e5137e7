"""Map-point store and per-track landmark (re)fitting against the current pose estimates."""

from __future__ import annotations

import logging
from typing import Mapping

import numpy as np

from .association import ObjectTrack
from .geometry import CameraRig, EllipsoidParams, Pose
from .quadric import (
    EstimationError,
    EstimatorConfig,
    Observation,
    ObservationSet,
    init_quadric,
    optimize_quadric,
)

log = logging.getLogger(__name__)

# a fit flatter than this is treated as not yet observable and refitted on every new view
MIN_AXIS_RATIO = 0.2


class MapPoints:
    """Map points anchored to the keyframe that first observed them.

    World positions are always derived from the anchor keyframe's current
    pose, so a pose-graph update re-expresses every point rigidly.
    """

    def __init__(self):
        self.ref_frame: dict[int, int] = {}
        self.local: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.ref_frame)

    def add(self, frame_id: int, track_ids, positions) -> None:
        for tid, p in zip(np.asarray(track_ids).tolist(), np.asarray(positions, dtype=float)):
            if tid not in self.ref_frame:
                self.ref_frame[tid] = frame_id
                self.local[tid] = p.copy()

    def world(self, track_ids, body_poses: Mapping[int, Pose]) -> np.ndarray:
        out = []
        for tid in track_ids:
            if tid in self.ref_frame:
                out.append(body_poses[self.ref_frame[tid]].inverse().apply(self.local[tid]))
        return np.asarray(out, dtype=float).reshape(-1, 3)

    def all_world(self, body_poses: Mapping[int, Pose]):
        ids = sorted(self.ref_frame)
        return np.asarray(ids, dtype=np.int64), self.world(ids, body_poses)


def track_observation_set(track: ObjectTrack, body_poses: Mapping[int, Pose], rig: CameraRig,
                          points: MapPoints | None = None) -> ObservationSet:
    obs = []
    for (cam, frame) in sorted(track.history):
        det = track.history[(cam, frame)]
        pose = rig.extrinsics[cam] @ body_poses[frame]
        obs.append(Observation(cam, frame, det.ellipse, pose))
    pts = np.zeros((0, 3))
    if points is not None and track.point_ids:
        pts = points.world(track.supported_points(), body_poses)
    return ObservationSet(obs, pts)


def update_provisional(track: ObjectTrack, body_poses: Mapping[int, Pose], rig: CameraRig,
                       points: MapPoints | None) -> None:
    """Coarse sphere from the track's points, used for gating until a full fit exists."""
    if track.landmark is not None or not track.point_ids or points is None:
        track.provisional = None
        return
    obs = track_observation_set(track, body_poses, rig, points)
    try:
        track.provisional = init_quadric(obs) if obs.point_centroid is not None else None
    except EstimationError:
        track.provisional = None


def fit_track(track: ObjectTrack, body_poses: Mapping[int, Pose], rig: CameraRig,
              points: MapPoints | None, cfg: EstimatorConfig, reinit_center: bool = False) -> bool:
    """(Re)estimate the track's ellipsoid; returns True if the landmark was updated."""
    if track.n_observations < cfg.min_observations:
        return False
    obs = track_observation_set(track, body_poses, rig, points)
    try:
        if track.landmark is None:
            init = init_quadric(obs)
        elif reinit_center and obs.point_centroid is not None:
            init = EllipsoidParams(obs.point_centroid, track.landmark.rotation, track.landmark.semi_axes)
        else:
            init = track.landmark
        fit = optimize_quadric(init, obs, cfg)
    except EstimationError as exc:
        log.debug("track %d: %s", track.object_id, exc)
        return False
    if not np.all(np.isfinite(fit.params.center)) or not np.all(np.isfinite(fit.params.semi_axes)):
        return False
    track.landmark = fit.params
    track.provisional = None
    axes = fit.params.semi_axes
    track.obs_at_last_fit = track.n_observations if axes.min() >= MIN_AXIS_RATIO * axes.max() else 0
    return True
