"""Three-stage object association: temporal memory, semantic gate, geometric check."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    EllipsoidParams,
    GaussianEllipse,
    GeometryError,
    Pose,
    conic_to_gaussian,
    ellipse_iou,
    project_quadric,
    wasserstein2_sq,
)
from .semantic import normalize

log = logging.getLogger(__name__)

MIN_SPAWN_AREA = 1e-6


class DuplicateKey(KeyError):
    pass


@dataclass(frozen=True)
class AssociationConfig:
    C: float = 0.1
    score_threshold: float = 0.05
    semantic_gate: float = 0.6
    memory_horizon: int = 100
    max_depth: float = 30.0  # landmarks farther from the camera are not candidates
    use_memory: bool = True
    use_geometry: bool = True

    def __post_init__(self):
        if self.C <= 0:
            raise ValueError("C must be positive")
        if not 0 < self.score_threshold < 1:
            raise ValueError("score_threshold must lie in (0, 1)")
        if self.max_depth <= 0:
            raise ValueError("max_depth must be positive")


@dataclass(frozen=True, eq=False)
class Detection:
    camera_id: int
    frame_id: int
    ellipse: GaussianEllipse
    class_label: str
    embedding: np.ndarray
    track_hint: Optional[int] = None
    # simulator bookkeeping, never read by the association cascade
    gt_id: Optional[int] = None
    views: tuple = ()
    point_ids: tuple = ()

    def __post_init__(self):
        e = np.asarray(self.embedding, dtype=float)
        if abs(np.linalg.norm(e) - 1.0) > 1e-6:
            raise ValueError("detection embedding must be unit norm")
        object.__setattr__(self, "embedding", e)

    @property
    def key(self) -> tuple[int, int]:
        return (self.camera_id, self.frame_id)


@dataclass
class ObjectTrack:
    object_id: int
    class_label: str
    embedding: np.ndarray
    memory: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)
    landmark: Optional[EllipsoidParams] = None
    provisional: Optional[EllipsoidParams] = None  # coarse gate for tracks not yet fitted
    selected: Optional[np.ndarray] = None
    obs_at_last_fit: int = 0
    embedding_sum: np.ndarray = None
    point_ids: Counter = field(default_factory=Counter)  # map point -> detections that carried it

    def __post_init__(self):
        if self.embedding_sum is None:
            self.embedding_sum = np.zeros_like(np.asarray(self.embedding, dtype=float))

    @property
    def n_observations(self) -> int:
        return len(self.history)

    def supported_points(self, share: float = 0.25) -> list[int]:
        """Map points carried by at least ``share`` of the best-supported point's detections.

        A single mis-associated detection brings in another object's points
        with support 1; they must not drag the centroid prior.
        """
        if not self.point_ids:
            return []
        floor = share * max(self.point_ids.values())
        return sorted(p for p, n in self.point_ids.items() if n >= floor)

    def hints(self) -> Counter:
        return Counter(d.track_hint for d in self.memory.values() if d.track_hint is not None)


def update_memory(track: ObjectTrack, detection: Detection, horizon: int = 100) -> ObjectTrack:
    """Record ``detection`` in the track's memory and refresh its running embedding."""
    if detection.key in track.memory or detection.key in track.history:
        raise DuplicateKey(f"track {track.object_id} already holds {detection.key}")
    track.memory[detection.key] = detection
    track.history[detection.key] = detection
    track.embedding_sum = track.embedding_sum + detection.embedding
    track.embedding = normalize(track.embedding_sum)
    newest = max(f for _, f in track.memory)
    for key in [k for k in track.memory if newest - k[1] > horizon]:
        del track.memory[key]
    return track


def w_score(est: GaussianEllipse, obs: GaussianEllipse, cfg: AssociationConfig = AssociationConfig()) -> float:
    """Overlap-weighted shape similarity in [0, 1]."""
    iou = ellipse_iou(est, obs)
    if iou <= 0.0:
        return 0.0
    return float(iou * np.exp(-np.sqrt(wasserstein2_sq(est, obs)) / cfg.C))


class TrackStore:
    """Single-writer store of object tracks with monotonically increasing ids."""

    def __init__(self):
        self.tracks: dict[int, ObjectTrack] = {}
        self._next_id = 0

    def __len__(self):
        return len(self.tracks)

    def __iter__(self):
        return iter(self.tracks[k] for k in sorted(self.tracks))

    def __getitem__(self, object_id):
        return self.tracks[object_id]

    def spawn(self, detection: Detection) -> ObjectTrack:
        track = ObjectTrack(self._next_id, detection.class_label, detection.embedding.copy())
        self.tracks[track.object_id] = track
        self._next_id += 1
        return track

    def remove(self, object_id: int):
        del self.tracks[object_id]

    def memory_candidates(self, hint) -> list[int]:
        """Tracks whose memory holds ``hint``, most frequent first (ties: lower id)."""
        if hint is None:
            return []
        counts = []
        for t in self:
            c = t.hints().get(hint, 0)
            if c:
                counts.append((-c, t.object_id))
        return [oid for _, oid in sorted(counts)]


def _gate_shape(track: ObjectTrack) -> EllipsoidParams | None:
    return track.landmark if track.landmark is not None else track.provisional


def _predicted_ellipse(track: ObjectTrack, pose: Pose, max_depth: float = np.inf) -> GaussianEllipse | None:
    shape = _gate_shape(track)
    if shape is None or np.linalg.norm(pose.apply(shape.center)) > max_depth:
        return None
    try:
        return conic_to_gaussian(project_quadric(shape, pose))
    except GeometryError:
        return None


def _semantic_ok(track: ObjectTrack, det: Detection, cfg: AssociationConfig) -> bool:
    return track.class_label == det.class_label and float(track.embedding @ det.embedding) >= cfg.semantic_gate


def _memory_score(track: ObjectTrack, det: Detection, pose: Pose, cfg: AssociationConfig):
    """Geometric check for a memory-backed candidate; None means vetoed.

    A fitted landmark must reach ``score_threshold``. A track with only a
    provisional sphere must overlap the detection at all, and a track with no
    geometry yet is trusted on memory and semantics alone.
    """
    if not cfg.use_geometry:
        return 1.0
    pred = _predicted_ellipse(track, pose, cfg.max_depth)
    if track.landmark is not None:
        if pred is None:
            return None
        s = w_score(pred, det.ellipse, cfg)
        return s if s >= cfg.score_threshold else None
    if track.provisional is not None:
        if pred is None or ellipse_iou(pred, det.ellipse) <= 0.0:
            return None
        return w_score(pred, det.ellipse, cfg)
    return 1.0


def unify_tracks(detections: Sequence[Detection], store: TrackStore,
                 camera_poses: Sequence[Pose], cfg: AssociationConfig = AssociationConfig(),
                 update: bool = True) -> dict[int, int]:
    """Assign each detection of one frame to an object id.

    Returns ``{detection index: object_id}``. Detections that cannot be matched
    spawn new tracks; same-frame detections from different cameras sharing a
    hint and passing the semantic gate are unified under one new track.
    """
    if not detections:
        return {}
    frames = {d.frame_id for d in detections}
    if len(frames) != 1:
        raise ValueError("unify_tracks expects detections from a single frame")

    proposals = []  # (score, priority, memory rank, det index, object_id)
    for i, det in enumerate(detections):
        pose = camera_poses[det.camera_id]
        mem = store.memory_candidates(det.track_hint) if cfg.use_memory else []
        for rank, oid in enumerate(mem):
            track = store[oid]
            if not _semantic_ok(track, det, cfg):
                continue
            s = _memory_score(track, det, pose, cfg)
            if s is not None:
                proposals.append((s, 0, rank, i, oid))
        if not cfg.use_geometry:
            continue
        for track in store:
            if track.object_id in mem or track.landmark is None or not _semantic_ok(track, det, cfg):
                continue
            pred = _predicted_ellipse(track, pose, cfg.max_depth)
            if pred is None:
                continue
            s = w_score(pred, det.ellipse, cfg)
            if s >= cfg.score_threshold:
                proposals.append((s, 1, 0, i, track.object_id))

    # greedy: memory-backed first, then by descending score, ties by lower id
    proposals.sort(key=lambda p: (p[1], -p[0], p[2], p[4], p[3]))
    assignment: dict[int, int] = {}
    taken = set()
    for s, _, _, i, oid in proposals:
        det = detections[i]
        if i in assignment or (oid, det.camera_id) in taken:
            continue
        if (det.camera_id, det.frame_id) in store[oid].history:
            continue
        assignment[i] = oid
        taken.add((oid, det.camera_id))

    # spawn: group unmatched detections sharing a hint across cameras
    new_groups: dict = {}
    for i, det in enumerate(detections):
        if i in assignment:
            continue
        if det.ellipse.area < MIN_SPAWN_AREA:
            continue
        placed = False
        if det.track_hint is not None:
            for gkey, members in new_groups.items():
                head = detections[members[0]]
                if (gkey[0] == det.track_hint and head.class_label == det.class_label
                        and all(detections[m].camera_id != det.camera_id for m in members)
                        and float(head.embedding @ det.embedding) >= cfg.semantic_gate):
                    members.append(i)
                    placed = True
                    break
        if not placed:
            new_groups[(det.track_hint, i)] = [i]
    for members in new_groups.values():
        track = store.spawn(detections[members[0]])
        track.embedding_sum = np.zeros_like(track.embedding)
        for m in members:
            assignment[m] = track.object_id

    if update:
        for i in sorted(assignment):
            update_memory(store[assignment[i]], detections[i], cfg.memory_horizon)
    return assignment
