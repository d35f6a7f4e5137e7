"""End-to-end run: simulate, associate, estimate, map, close loops, build the scene graph."""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .association import TrackStore, unify_tracks
from .config import PipelineConfig, config_to_dict, load_config
from .evaluation import RunReport, association_pr, evaluate_ate, evaluate_objects, loop_pr
from .geometry import Pose, quat_wxyz
from .loop_closure import (
    InsufficientCorrespondences,
    Keyframe,
    VerificationFailed,
    VerifiedLoop,
    build_scene_descriptor,
    correct_loop,
    loop_candidates,
    merge_duplicates,
    verify_keyframes,
)
from .mapping import MapPoints, fit_track, update_provisional
from .posegraph import PoseGraph, inv_T
from .scene_graph import SceneGraph, build_scene_graph, export_graph
from .semantic import select_segment_feature
from .simulation import GroundTruth, generate_world, simulate_run

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


@dataclass
class PipelineResult:
    config: PipelineConfig
    gt: GroundTruth
    report: RunReport
    odometry: list
    poses: list  # final world-to-body estimates
    store: TrackStore
    graph: PoseGraph
    scene: SceneGraph
    points: MapPoints
    keyframes: list
    loops: list[VerifiedLoop] = field(default_factory=list)
    loop_poses_before: list = field(default_factory=list)  # estimates right before each correction


def _segments(frame, assignment, detections):
    """Per-detection (embedding, distance) using the mean of the object's visible points."""
    body = {int(p): x for p, x in zip(frame.points.point_ids, frame.points.positions)}
    out = []
    for i in sorted(assignment):
        det = detections[i]
        pts = [body[p] for p in det.point_ids if p in body]
        if pts:
            d = float(np.linalg.norm(np.mean(pts, axis=0)))
            if d > 0:
                out.append((det.embedding, d))
    return out


def _attach_points(frame, assignment, detections, store):
    track_of = {int(p): int(t) for p, t in zip(frame.points.point_ids, frame.points.track_ids)}
    for i, oid in assignment.items():
        for p in detections[i].point_ids:
            if p in track_of:
                store[oid].point_ids[track_of[p]] += 1


def run_pipeline(config, out_dir=None, report_format: str = "csv") -> PipelineResult:
    """Run the full system on a simulated world; optionally write artifacts to ``out_dir``."""
    stage = _Stages()
    with stage("config"):
        cfg = config if isinstance(config, PipelineConfig) else load_config(config)
    with stage("simulate"):
        gt = generate_world(cfg.sim)
        frames = simulate_run(gt, cfg.sim)

    rig = gt.rig
    store = TrackStore()
    points = MapPoints()
    graph = PoseGraph()
    poses: dict[int, Pose] = {}
    keyframes: list[Keyframe] = []
    loops: list[VerifiedLoop] = []
    before: list = []
    true_dets = []
    corrected = False

    def refit(t):
        fit_track(t, poses, rig, points, cfg.estimator)
        if t.landmark is None:
            update_provisional(t, poses, rig, points)

    for frame in frames:
        k = frame.frame_id
        with stage("odometry"):
            # graph nodes are body-to-world; odometry poses are world-to-body
            T_odom = inv_T(frame.odometry.matrix())
            Z = frames[k - 1].odometry.matrix() @ T_odom if k > 0 else None
            T = graph.nodes[k - 1] @ Z if corrected else T_odom
            graph.add_node(k, T)
            if k > 0:
                graph.add_edge(k - 1, k, Z, 1.0, kind="odometry")
            poses[k] = frame.odometry if not corrected else Pose.from_matrix(inv_T(T))
            points.add(k, frame.points.track_ids, frame.points.positions)

        with stage("association"):
            dets = frame.all_detections()
            true_dets.extend(d for d in dets if d.gt_id is not None)
            assignment = unify_tracks(dets, store, rig.camera_poses(poses[k]), cfg.association)
            _attach_points(frame, assignment, dets, store)

        with stage("estimation"):
            for oid in sorted(set(assignment.values())):
                t = store[oid]
                due = t.n_observations - t.obs_at_last_fit >= cfg.reoptimize_every
                if (t.landmark is None and t.n_observations >= cfg.estimator.min_observations) or due:
                    fit_track(t, poses, rig, points, cfg.estimator)
                if t.landmark is None:
                    update_provisional(t, poses, rig, points)
            if cfg.merge_every_frame:
                merge_duplicates(store, cfg.loop, refit)

        with stage("descriptor"):
            desc = build_scene_descriptor(frame.camera_features, _segments(frame, assignment, dets))
            kf = Keyframe(k, desc, frozenset(frame.points.track_ids.tolist()),
                          frame.points.descriptor_ids, frame.points.positions,
                          frozenset(assignment.values()))
            keyframes.append(kf)

        if not cfg.loop_closure or (loops and k - loops[-1].query <= cfg.loop.cooldown):
            continue
        with stage("loop_closure"):
            for cand in loop_candidates(kf, keyframes, cfg.loop)[:cfg.loop.max_candidates]:
                try:
                    loop = verify_keyframes(kf, keyframes[cand.frame_id], cfg.loop)
                except (InsufficientCorrespondences, VerificationFailed) as exc:
                    log.debug("keyframe %d vs %d rejected: %s", k, cand.frame_id, exc)
                    continue
                before.append([poses[i] for i in sorted(poses)])
                res = correct_loop(graph, loop, store, cfg.loop, rig, points, cfg.estimator)
                if res.converged or res.cost_after <= res.cost_before:
                    poses.update(res.poses)
                    loops.append(loop)
                    corrected = True
                break

    with stage("finalize"):
        if cfg.loop_closure and corrected:
            merge_duplicates(store, cfg.loop, refit)
        for t in store:
            if t.n_observations > t.obs_at_last_fit:
                fit_track(t, poses, rig, points, cfg.estimator)
            if t.landmark is not None:
                embs = [t.history[key].embedding for key in sorted(t.history)]
                t.selected = select_segment_feature(embs, cfg.semantic.eps, cfg.semantic.min_pts)

    with stage("scene_graph"):
        fitted = [t for t in store if t.landmark is not None]
        scene = build_scene_graph(fitted, gt.roads, poses, points.all_world(poses))

    with stage("evaluate"):
        order = sorted(poses)
        odom = [f.odometry for f in frames]
        final = [poses[i] for i in order]
        ate_pre = evaluate_ate(odom, gt.rig_poses)
        ate_post = evaluate_ate(final, gt.rig_poses) if corrected else ate_pre
        est = {t.object_id: t.landmark for t in fitted}
        gtd = {o.object_id: o.ellipsoid for o in gt.objects}
        objs, missed, spurious = evaluate_objects(est, gtd)
        ap, ar = association_pr(list(store), true_dets)
        lp, lr = loop_pr([(l.query, l.candidate) for l in loops], gt.point_visible,
                         cfg.loop.min_temporal_gap, cfg.loop.min_covisible_points)
        report = RunReport(ate_pre, ate_post, ap, ar, lp, lr, len(loops), len(fitted), len(gt.objects),
                           missed, spurious, objs, [[l.query, l.candidate] for l in loops])

    result = PipelineResult(cfg, gt, report, odom, final, store, graph, scene, points, keyframes, loops, before)
    if out_dir is not None:
        with stage("export"):
            write_artifacts(result, out_dir, report_format)
    report.timings = dict(stage.timings)
    if out_dir is not None:
        (Path(out_dir) / "timings.csv").write_text(report.timings_csv())
    return result


def tum_lines(poses) -> str:
    """``timestamp tx ty tz qx qy qz qw`` per keyframe, body-to-world, 9 significant digits."""
    lines = []
    for k, p in enumerate(poses):
        w, x, y, z = quat_wxyz(p.R.T)
        vals = [k, *p.center, x, y, z, w]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + "\n"


def write_report(report: RunReport, path, fmt: str = "csv") -> None:
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    Path(path).write_text(report.to_csv() if fmt == "csv" else report.to_json() + "\n")


def write_artifacts(result: PipelineResult, out_dir, report_format: str = "csv") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory_pre.txt").write_text(tum_lines(result.odometry))
    (out / "trajectory_post.txt").write_text(tum_lines(result.poses))
    (out / "trajectory_gt.txt").write_text(tum_lines(result.gt.rig_poses))
    export_graph(result.scene, out / "scene_graph.json")
    write_report(result.report, out / f"metrics.{report_format}", report_format)
    (out / "config.yaml").write_text(yaml.safe_dump(config_to_dict(result.config), sort_keys=True))
