"""Trajectory, object, association and loop metrics plus the run report."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import EllipsoidParams, Pose, rigid_align

MATCH_GATE = 2.0
IOU_GRID = 64


class LengthMismatch(ValueError):
    pass


def _positions(poses) -> np.ndarray:
    if len(poses) and isinstance(poses[0], Pose):
        return np.array([p.center for p in poses])
    return np.asarray(poses, dtype=float).reshape(-1, 3)


def evaluate_ate(estimated, ground_truth) -> float:
    """Positional RMSE after least-squares rigid alignment of ``estimated`` onto ``ground_truth``.

    Accepts sequences of world-to-body ``Pose`` or (n, 3) position arrays.
    """
    est, gt = _positions(estimated), _positions(ground_truth)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    if len(est) < 3:
        raise ValueError("need at least 3 poses")
    T = rigid_align(est, gt)
    err = T.apply(est) - gt
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


# ---------------------------------------------------------------------------
# objects

def _bbox(e: EllipsoidParams):
    half = np.sqrt(np.sum((e.rotation * e.semi_axes) ** 2, axis=1))
    return e.center - half, e.center + half


def ellipsoid_iou(a: EllipsoidParams, b: EllipsoidParams, grid: int = IOU_GRID) -> float:
    """Volumetric IoU by voxel-center sampling of the union bounding box."""
    lo_a, hi_a = _bbox(a)
    lo_b, hi_b = _bbox(b)
    lo, hi = np.minimum(lo_a, lo_b), np.maximum(hi_a, hi_b)
    axes = [lo[k] + (np.arange(grid) + 0.5) * (hi[k] - lo[k]) / grid for k in range(3)]

    def inside(e: EllipsoidParams):
        # separable evaluation of the ellipsoid's local coordinates over the grid
        M = e.rotation / e.semi_axes
        u = [np.outer(axes[k] - e.center[k], M[k]) for k in range(3)]
        local = u[0][:, None, None] + u[1][None, :, None] + u[2][None, None, :]
        return np.einsum("ijkl,ijkl->ijk", local, local) <= 1.0

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return float(np.count_nonzero(ia & ib) / union) if union else 0.0


@dataclass
class ObjectMetrics:
    gt_id: int
    object_id: int
    center_error: float
    axis_error: float
    iou: float


def match_objects(estimated: dict, gt: dict, gate: float = MATCH_GATE) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by center distance; returns ``(est_id, gt_id, dist)``."""
    pairs = []
    for eid, e in estimated.items():
        for gid, g in gt.items():
            d = float(np.linalg.norm(e.center - g.center))
            if d <= gate:
                pairs.append((d, eid, gid))
    pairs.sort()
    used_e, used_g, out = set(), set(), []
    for d, eid, gid in pairs:
        if eid in used_e or gid in used_g:
            continue
        used_e.add(eid)
        used_g.add(gid)
        out.append((eid, gid, d))
    return out


def evaluate_objects(estimated: dict, gt: dict, gate: float = MATCH_GATE,
                     grid: int = IOU_GRID) -> tuple[list[ObjectMetrics], int, int]:
    """Per-matched-object metrics plus the counts of missed GT and unmatched estimates.

    ``estimated`` and ``gt`` map ids to ``EllipsoidParams``. Semi-axes are
    compared after sorting, since axis order is a labelling choice.
    """
    matches = match_objects(estimated, gt, gate)
    out = []
    for eid, gid, d in sorted(matches, key=lambda m: m[1]):
        e, g = estimated[eid], gt[gid]
        ae, ag = np.sort(e.semi_axes), np.sort(g.semi_axes)
        out.append(ObjectMetrics(gid, eid, d, float(np.mean(np.abs(ae - ag) / ag)),
                                 ellipsoid_iou(e, g, grid)))
    return out, len(gt) - len(matches), len(estimated) - len(matches)


# ---------------------------------------------------------------------------
# association

def association_pr(tracks, true_detections: Sequence) -> tuple[float, float]:
    """Precision and recall of the object-id assignment against ground-truth ids.

    Each track is labelled with its majority true id. Precision counts the
    detections in real-object tracks that carry that id; false positives are
    errors only when they land in a real object's track. Recall is, per true
    object, the share of its emitted detections held by its dominant track.
    """
    correct = total = 0
    held = defaultdict(Counter)  # gt id -> track id -> count
    for t in tracks:
        ids = [d.gt_id for d in t.history.values()]
        real = Counter(i for i in ids if i is not None)
        for gid, c in real.items():
            held[gid][t.object_id] += c
        if not real:
            continue
        label, _ = max(real.items(), key=lambda kv: (kv[1], -kv[0]))
        correct += real[label]
        total += len(ids)
    emitted = Counter(d.gt_id for d in true_detections if d.gt_id is not None)
    recalled = sum(max(held[g].values()) if held[g] else 0 for g in emitted)
    precision = correct / total if total else 1.0
    recall = recalled / sum(emitted.values()) if emitted else 1.0
    return float(precision), float(recall)


# ---------------------------------------------------------------------------
# loops

def shared_points(point_visible: np.ndarray, a: int, b: int) -> int:
    return int(np.count_nonzero(point_visible[a] & point_visible[b]))


def revisit_events(point_visible: np.ndarray, min_gap: int, min_shared: int) -> list[list[int]]:
    """Runs of consecutive keyframes that truly see the same points as a keyframe ``min_gap`` older."""
    V = np.asarray(point_visible, dtype=bool)
    hits = []
    for k in range(len(V)):
        old = V[:max(k - min_gap + 1, 0)]
        if len(old) and np.max(np.count_nonzero(old & V[k], axis=1)) >= min_shared:
            hits.append(k)
    events = []
    for k in hits:
        if events and events[-1][-1] == k - 1:
            events[-1].append(k)
        else:
            events.append([k])
    return events


def loop_pr(loops: Sequence[tuple[int, int]], point_visible: np.ndarray, min_gap: int,
            min_shared: int = 30) -> tuple[float, float]:
    """Loop-detection precision and recall against ground-truth co-visibility.

    A loop is true if both keyframes see at least ``min_shared`` common
    ground-truth points; recall counts revisit events with at least one true loop.
    """
    true = [(q, c) for q, c in loops if shared_points(point_visible, q, c) >= min_shared]
    precision = len(true) / len(loops) if loops else 1.0
    events = revisit_events(point_visible, min_gap, min_shared)
    found = sum(any(q in ev for q, _ in true) for ev in events)
    recall = found / len(events) if events else 1.0
    return float(precision), float(recall)


# ---------------------------------------------------------------------------
# report

@dataclass
class RunReport:
    ate_pre: float
    ate_post: float
    association_precision: float
    association_recall: float
    loop_precision: float
    loop_recall: float
    n_loops: int
    n_tracks: int
    n_gt_objects: int
    objects_missed: int
    objects_spurious: int
    objects: list = field(default_factory=list)
    loops: list = field(default_factory=list)
    # wall-clock seconds per stage; excluded from the deterministic serializations
    timings: dict = field(default_factory=dict, compare=False)

    def _mean(self, attr) -> float:
        vals = [getattr(o, attr) for o in self.objects]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def center_error_mean(self) -> float:
        return self._mean("center_error")

    @property
    def axis_error_mean(self) -> float:
        return self._mean("axis_error")

    @property
    def iou_mean(self) -> float:
        return self._mean("iou")

    def rows(self) -> list[tuple[str, str, float]]:
        rows = [
            ("ate_rmse", "pre_loop", self.ate_pre),
            ("ate_rmse", "post_loop", self.ate_post),
            ("precision", "association", self.association_precision),
            ("recall", "association", self.association_recall),
            ("precision", "loop_detection", self.loop_precision),
            ("recall", "loop_detection", self.loop_recall),
            ("count", "loops", self.n_loops),
            ("count", "tracks", self.n_tracks),
            ("count", "gt_objects", self.n_gt_objects),
            ("count", "objects_missed", self.objects_missed),
            ("count", "objects_spurious", self.objects_spurious),
            ("center_error_mean", "objects", self.center_error_mean),
            ("axis_error_mean", "objects", self.axis_error_mean),
            ("iou_mean", "objects", self.iou_mean),
        ]
        for o in self.objects:
            stage = f"object_{o.gt_id}"
            rows += [("center_error", stage, o.center_error), ("axis_error", stage, o.axis_error),
                     ("iou", stage, o.iou)]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "stage", "value"])
        for m, s, v in self.rows():
            w.writerow([m, s, f"{v:.9g}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("timings")
        d["center_error_mean"] = self.center_error_mean
        d["axis_error_mean"] = self.axis_error_mean
        d["iou_mean"] = self.iou_mean
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def timings_csv(self) -> str:
        lines = ["metric,stage,value"]
        lines += [f"wall_clock_s,{k},{v:.6f}" for k, v in self.timings.items()]
        return "\n".join(lines) + "\n"
