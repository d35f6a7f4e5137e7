"""Hierarchical scene graph: environment root, roads, objects and a metric layer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import Pose, polyline_distance, quat_wxyz

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class IoFailure(OSError):
    pass


def fmt(x) -> float:
    """Round to 9 significant digits; idempotent, so export is byte-stable."""
    return float(f"{float(x):.9g}")


def fmt_list(a) -> list:
    return [fmt(v) for v in np.asarray(a, dtype=float).ravel()]


@dataclass
class RoadNode:
    road_id: int
    polyline: np.ndarray


@dataclass
class ObjectNode:
    object_id: int
    class_label: str
    embedding: np.ndarray
    center: np.ndarray
    quat_wxyz: np.ndarray
    semi_axes: np.ndarray
    parent_road: Optional[int]  # None: attached to the root


@dataclass
class MetricLayer:
    """Keyframe poses and annotated map points.

    A freshly built layer holds references to the live pose dict and point
    arrays; a loaded layer only has the serialized ``records``.
    """

    poses: Optional[Mapping[int, Pose]] = None
    point_ids: Optional[np.ndarray] = None
    point_xyz: Optional[np.ndarray] = None
    point_labels: Optional[Mapping[int, int]] = None
    records: Optional[dict] = None

    def to_dict(self) -> dict:
        if self.records is not None:
            return self.records
        kfs = []
        for k in sorted(self.poses or {}):
            p = self.poses[k]
            kfs.append({"id": int(k), "position": fmt_list(p.center), "quat_wxyz": fmt_list(quat_wxyz(p.R.T))})
        pts = []
        if self.point_ids is not None:
            labels = self.point_labels or {}
            for pid, xyz in zip(np.asarray(self.point_ids).tolist(), self.point_xyz):
                pts.append({"id": int(pid), "position": fmt_list(xyz), "object": labels.get(pid)})
        return {"keyframes": kfs, "points": pts}


@dataclass
class SceneGraph:
    roads: list[RoadNode] = field(default_factory=list)
    objects: list[ObjectNode] = field(default_factory=list)
    metric: MetricLayer = field(default_factory=MetricLayer)
    degenerate: bool = False

    def parent_of(self, object_id: int) -> Optional[int]:
        for o in self.objects:
            if o.object_id == object_id:
                return o.parent_road
        raise KeyError(object_id)

    def children(self, road_id: Optional[int]) -> list[int]:
        return [o.object_id for o in self.objects if o.parent_road == road_id]

    def to_dict(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "root": {"name": "environment", "degenerate": bool(self.degenerate),
                     "roads": [r.road_id for r in self.roads],
                     "objects": self.children(None)},
            "roads": [{"id": r.road_id, "polyline": [fmt_list(p) for p in r.polyline],
                       "objects": self.children(r.road_id)} for r in self.roads],
            "objects": [{
                "id": o.object_id, "class": o.class_label,
                "embedding": fmt_list(o.embedding), "center": fmt_list(o.center),
                "quat_wxyz": fmt_list(o.quat_wxyz), "semi_axes": fmt_list(o.semi_axes),
                "parent_road": o.parent_road,
            } for o in self.objects],
            "metric": self.metric.to_dict(),
        }


def nearest_road(center, roads: Sequence[RoadNode]) -> Optional[int]:
    """Road whose ground-plane polyline is closest to ``center``; ties go to the lower id."""
    best, best_d = None, np.inf
    for r in sorted(roads, key=lambda r: r.road_id):
        d = polyline_distance(np.asarray(center)[:2], r.polyline[:, :2])
        if d < best_d:
            best, best_d = r.road_id, d
    return best


def build_scene_graph(tracks, roads: Sequence[np.ndarray], poses: Mapping[int, Pose] | None = None,
                      points=None, min_observations: int = 1) -> SceneGraph:
    """Assemble the graph from fitted tracks.

    ``points`` is ``(ids, xyz)`` or None; a point is annotated with the object
    whose track claims its id. Tracks without a landmark are skipped.
    """
    road_nodes = [RoadNode(i, np.asarray(r, dtype=float)) for i, r in enumerate(roads)]
    degenerate = not road_nodes
    if degenerate:
        log.warning("no roads: objects attach to the root")
    objects = []
    labels = {}
    for t in sorted(tracks, key=lambda t: t.object_id):
        if t.landmark is None or getattr(t, "n_observations", min_observations) < min_observations:
            continue
        emb = t.selected if getattr(t, "selected", None) is not None else t.embedding
        lm = t.landmark
        objects.append(ObjectNode(int(t.object_id), t.class_label, np.asarray(emb, dtype=float),
                                  lm.center.copy(), quat_wxyz(lm.rotation), lm.semi_axes.copy(),
                                  nearest_road(lm.center, road_nodes)))
        support = getattr(t, "supported_points", None)
        for pid in support() if support else sorted(getattr(t, "point_ids", ())):
            labels.setdefault(pid, int(t.object_id))
    metric = MetricLayer(poses=poses)
    if points is not None:
        metric.point_ids, metric.point_xyz = points
        metric.point_labels = labels
    return SceneGraph(road_nodes, objects, metric, degenerate)


def query_objects(graph: SceneGraph, query_embedding, top_k: int = 5) -> list[tuple[int, float]]:
    """``(object_id, cosine)`` pairs, best first; ties go to the lower id."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    q = np.asarray(query_embedding, dtype=float)
    qn = np.linalg.norm(q)
    scored = []
    for o in graph.objects:
        en = np.linalg.norm(o.embedding)
        s = float(o.embedding @ q / (en * qn)) if en > 0 and qn > 0 else 0.0
        scored.append((-s, o.object_id))
    scored.sort()
    return [(oid, -s) for s, oid in scored[:top_k]]


def dumps_graph(graph: SceneGraph) -> str:
    return json.dumps(graph.to_dict(), sort_keys=True, separators=(",", ":"))


def export_graph(graph: SceneGraph, path) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(dumps_graph(graph))
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write scene graph to {path}: {exc}") from exc


def graph_from_dict(doc: dict) -> SceneGraph:
    if doc.get("v") != SCHEMA_VERSION:
        raise ValueError(f"unsupported scene-graph schema version {doc.get('v')!r}")
    roads = [RoadNode(int(r["id"]), np.asarray(r["polyline"], dtype=float).reshape(-1, 3))
             for r in doc["roads"]]
    objects = [ObjectNode(int(o["id"]), o["class"], np.asarray(o["embedding"], dtype=float),
                          np.asarray(o["center"], dtype=float), np.asarray(o["quat_wxyz"], dtype=float),
                          np.asarray(o["semi_axes"], dtype=float), o["parent_road"])
               for o in doc["objects"]]
    return SceneGraph(roads, objects, MetricLayer(records=doc["metric"]), bool(doc["root"]["degenerate"]))


def load_graph(path) -> SceneGraph:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read scene graph {path}: {exc}") from exc
    return graph_from_dict(doc)
