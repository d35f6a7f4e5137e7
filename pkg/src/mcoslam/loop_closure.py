"""Scene-descriptor loop detection, RANSAC verification and loop correction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .association import ObjectTrack, TrackStore
from .config import LoopConfig
from .geometry import CameraRig, Pose, rigid_align
from .mapping import MapPoints, fit_track
from .posegraph import OptimizationDiverged, PoseGraph, inv_T, optimize_graph
from .quadric import EstimatorConfig
from .semantic import ZeroVector, cosine, normalize

log = logging.getLogger(__name__)


class InsufficientCorrespondences(ValueError):
    pass


class VerificationFailed(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SceneDescriptor:
    f_view: np.ndarray
    f_seg: Optional[np.ndarray] = None  # None: no segments in view


@dataclass(eq=False)
class Keyframe:
    frame_id: int
    descriptor: SceneDescriptor
    point_tracks: frozenset = frozenset()
    descriptor_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    local_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    object_ids: frozenset = frozenset()

    def covisibility(self, other: "Keyframe") -> int:
        return len(self.point_tracks & other.point_tracks)


@dataclass
class LoopCandidate:
    frame_id: int
    similarity: float


@dataclass
class VerifiedLoop:
    query: int
    candidate: int
    relative: Pose  # candidate body <- query body
    n_inliers: int
    inliers: np.ndarray


@dataclass
class LoopCorrection:
    poses: dict
    merged: list
    converged: bool
    cost_before: float
    cost_after: float


# ---------------------------------------------------------------------------
# descriptors

def build_scene_descriptor(per_camera_features: Sequence, segments: Sequence = ()) -> SceneDescriptor:
    """Mean of per-camera features plus inverse-distance-weighted segment features.

    Inputs are summed in a canonical (lexicographic) order, so the result is
    bit-identical under any permutation of cameras or segments.
    """
    if len(per_camera_features) == 0:
        raise ValueError("need at least one camera feature")
    F = np.asarray(per_camera_features, dtype=float)
    F = F[np.lexsort(F.T[::-1])]
    f_view = normalize(np.mean(F, axis=0))
    if len(segments) == 0:
        return SceneDescriptor(f_view, None)
    rows = np.asarray([np.append(dist, f) for f, dist in segments], dtype=float)
    rows = rows[np.lexsort(rows.T[::-1])]
    d, feats = rows[:, 0], rows[:, 1:]
    if np.any(d <= 0):
        raise ValueError("segment distances must be positive")
    w = (1.0 / d) / np.sum(1.0 / d)
    return SceneDescriptor(f_view, normalize(w @ feats))


def similarity(a: SceneDescriptor, b: SceneDescriptor, cfg: LoopConfig = LoopConfig()) -> float:
    s_view = cosine(a.f_view, b.f_view)
    if a.f_seg is None or b.f_seg is None:
        return s_view
    return cfg.alpha * s_view + cfg.beta * cosine(a.f_seg, b.f_seg)


def covisible_keyframes(query: Keyframe, keyframes: Sequence[Keyframe], cfg: LoopConfig) -> list[Keyframe]:
    return [k for k in keyframes
            if k.frame_id != query.frame_id and query.covisibility(k) >= cfg.min_covisible_points]


def adaptive_threshold(query: Keyframe, keyframes: Sequence[Keyframe], cfg: LoopConfig = LoopConfig()) -> float:
    """Lowest similarity among covisible keyframes, or the fixed fallback if there are none."""
    cov = covisible_keyframes(query, keyframes, cfg)
    if not cov:
        log.debug("keyframe %d has no covisible keyframes; fixed threshold", query.frame_id)
        return cfg.fallback_threshold
    return min(similarity(query.descriptor, k.descriptor, cfg) for k in cov)


def loop_candidates(query: Keyframe, keyframes: Sequence[Keyframe],
                    cfg: LoopConfig = LoopConfig()) -> list[LoopCandidate]:
    """Old, non-covisible keyframes at least as similar as the adaptive threshold, best first."""
    thr = adaptive_threshold(query, keyframes, cfg)
    out = []
    for k in keyframes:
        if query.frame_id - k.frame_id < cfg.min_temporal_gap:
            continue
        if query.covisibility(k) >= cfg.min_covisible_points:
            continue
        s = similarity(query.descriptor, k.descriptor, cfg)
        if s >= thr:
            out.append(LoopCandidate(k.frame_id, s))
    out.sort(key=lambda c: (-c.similarity, c.frame_id))
    return out


# ---------------------------------------------------------------------------
# verification

def match_keyframes(query: Keyframe, candidate: Keyframe):
    """Correspondences by descriptor id; returns (query xyz, candidate xyz)."""
    _, qi, ci = np.intersect1d(query.descriptor_ids, candidate.descriptor_ids,
                               assume_unique=False, return_indices=True)
    return query.local_points[qi], candidate.local_points[ci]


def geometric_verify(src, dst, cfg: LoopConfig = LoopConfig(), rng=None):
    """RANSAC rigid alignment with ``dst ~ T(src)``.

    Returns ``(Pose, inlier mask)``; the pose is refit on all inliers.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    n = len(src)
    if n < 3 or len(dst) != n:
        raise InsufficientCorrespondences(f"{n} correspondences, need >= 3")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    best = np.zeros(n, dtype=bool)
    for _ in range(cfg.ransac_iters):
        idx = rng.choice(n, 3, replace=False)
        T = rigid_align(src[idx], dst[idx])
        inl = np.linalg.norm(T.apply(src) - dst, axis=1) < cfg.inlier_dist
        if inl.sum() > best.sum():
            best = inl
    if best.sum() < max(cfg.min_inliers, 3):
        raise VerificationFailed(f"{int(best.sum())} inliers < {cfg.min_inliers}")
    T = rigid_align(src[best], dst[best])
    for _ in range(3):
        inl = np.linalg.norm(T.apply(src) - dst, axis=1) < cfg.inlier_dist
        if inl.sum() < 3 or np.array_equal(inl, best):
            break
        best = inl
        T = rigid_align(src[best], dst[best])
    if best.sum() < cfg.min_inliers:
        raise VerificationFailed(f"{int(best.sum())} inliers < {cfg.min_inliers}")
    return T, best


def verify_keyframes(query: Keyframe, candidate: Keyframe, cfg: LoopConfig = LoopConfig()) -> VerifiedLoop:
    src, dst = match_keyframes(query, candidate)
    rng = np.random.default_rng([cfg.seed, query.frame_id, candidate.frame_id])
    T, inl = geometric_verify(src, dst, cfg, rng)
    return VerifiedLoop(query.frame_id, candidate.frame_id, T, int(inl.sum()), inl)


# ---------------------------------------------------------------------------
# correction

def body_to_world(pose: Pose) -> np.ndarray:
    return inv_T(pose.matrix())


def relative_matrix(rel: Pose) -> np.ndarray:
    """Pose-graph measurement ``T_cand^{-1} T_query`` from a candidate <- query transform."""
    return rel.matrix()


def merge_tracks(store: TrackStore, keep: ObjectTrack, drop: ObjectTrack) -> None:
    """Fold ``drop`` into ``keep``: union memories, histories and points; ``keep``'s entries win."""
    for key, det in drop.history.items():
        if key not in keep.history:
            keep.history[key] = det
            keep.embedding_sum = keep.embedding_sum + det.embedding
    for key, det in drop.memory.items():
        if key not in keep.memory and key in keep.history and keep.history[key] is det:
            keep.memory[key] = det
    keep.point_ids.update(drop.point_ids)
    keep.embedding = normalize(keep.embedding_sum)
    store.remove(drop.object_id)


def _center(track: ObjectTrack):
    shape = track.landmark if track.landmark is not None else track.provisional
    return None if shape is None else shape.center


def merge_duplicates(store: TrackStore, cfg: LoopConfig, refit=None) -> list[tuple[int, int]]:
    """Merge same-class landmark pairs closer than ``merge_dist`` with embedding cosine >= ``merge_cos``.

    Tracks not yet fitted take part through their provisional shape. The lower
    object id survives; ``refit(track)`` is called once per surviving track.
    """
    merged = []
    changed = True
    while changed:
        changed = False
        tracks = [t for t in store if _center(t) is not None]
        for a_i, a in enumerate(tracks):
            for b in tracks[a_i + 1:]:
                if a.class_label != b.class_label:
                    continue
                d = np.linalg.norm(_center(a) - _center(b))
                if d < cfg.merge_dist and float(a.embedding @ b.embedding) >= cfg.merge_cos:
                    merge_tracks(store, a, b)
                    merged.append((a.object_id, b.object_id))
                    if refit is not None:
                        refit(a)
                    changed = True
                    break
            if changed:
                break
    return merged


def correct_loop(graph: PoseGraph, loop: VerifiedLoop, store: TrackStore, cfg: LoopConfig,
                 rig: CameraRig, points: MapPoints | None = None,
                 estimator: EstimatorConfig = EstimatorConfig()) -> LoopCorrection:
    """Add the loop edge, optimize the pose graph, refit landmarks and merge duplicates.

    On divergence the graph is left unchanged and ``converged`` is False.
    """
    edge = graph.add_edge(loop.candidate, loop.query, relative_matrix(loop.relative),
                          cfg.loop_information, kind="loop")
    try:
        res = optimize_graph(graph, cfg.gn_iterations)
    except OptimizationDiverged as exc:
        log.warning("loop %d->%d: %s", loop.query, loop.candidate, exc)
        graph.edges.remove(edge)
        poses = {k: Pose.from_matrix(inv_T(T)) for k, T in graph.nodes.items()}
        return LoopCorrection(poses, [], False, float("nan"), float("nan"))
    graph.nodes = res.nodes
    poses = {k: Pose.from_matrix(inv_T(T)) for k, T in graph.nodes.items()}

    def refit(track):
        fit_track(track, poses, rig, points, estimator, reinit_center=True)

    for track in store:
        if track.landmark is not None:
            refit(track)
    merged = merge_duplicates(store, cfg, refit)
    return LoopCorrection(poses, merged, res.converged, res.initial_cost, res.final_cost)
