"""Deterministic synthetic world standing in for the perception front end.

Every random channel draws from its own generator keyed by
``(seed, channel, frame, camera)``, so enabling or re-tuning one noise source
never shifts the draws of another and frames can be simulated in any order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from .association import Detection
from .config import SimConfig
from .geometry import (
    CameraIntrinsics,
    CameraRig,
    EllipsoidParams,
    GaussianEllipse,
    GeometryError,
    Pose,
    conic_to_gaussian,
    polyline_distance,
    project_quadric,
    quat_wxyz,
    rot_z,
    so3_exp,
)
from .semantic import fuse_view_features, normalize


class InfeasibleConfig(ValueError):
    pass


# channel ids: append new ones, never renumber
CH_OBJECTS, CH_EMBED, CH_POINTS, CH_PLACE = 1, 2, 3, 4
CH_MU, CH_SIGMA, CH_DROP, CH_HINT, CH_VIEW, CH_FP = 10, 11, 12, 13, 14, 15
CH_ODOM, CH_POINT_OBS, CH_CAMFEAT = 20, 21, 22


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


@dataclass(frozen=True, eq=False)
class GTObject:
    object_id: int
    class_label: str
    ellipsoid: EllipsoidParams
    embedding: np.ndarray
    road_id: int
    point_ids: tuple


@dataclass(eq=False)
class GroundTruth:
    rig: CameraRig
    rig_poses: list[Pose]
    objects: list[GTObject]
    prototypes: dict
    roads: list[np.ndarray]
    points: np.ndarray
    point_object: np.ndarray
    place_anchors: np.ndarray
    place_vectors: np.ndarray
    point_visible: np.ndarray = field(repr=False, default=None)

    @property
    def n_frames(self) -> int:
        return len(self.rig_poses)

    @cached_property
    def object_by_id(self) -> dict:
        return {o.object_id: o for o in self.objects}

    def to_dict(self) -> dict:
        def pose(p: Pose):
            return {"position": p.center.tolist(), "quat_wxyz": quat_wxyz(p.R.T).tolist()}
        return {
            "rig_poses": [pose(p) for p in self.rig_poses],
            "cameras": [{"intrinsics": vars(i), "extrinsic": pose(e)}
                        for i, e in zip(self.rig.intrinsics, self.rig.extrinsics)],
            "objects": [{
                "id": o.object_id, "class": o.class_label, "road": o.road_id,
                "center": o.ellipsoid.center.tolist(),
                "rotation": o.ellipsoid.rotation.tolist(),
                "semi_axes": o.ellipsoid.semi_axes.tolist(),
                "embedding": o.embedding.tolist(),
                "point_ids": list(o.point_ids),
            } for o in self.objects],
            "prototypes": {k: v.tolist() for k, v in self.prototypes.items()},
            "roads": [r.tolist() for r in self.roads],
            "points": self.points.tolist(),
            "point_object": self.point_object.tolist(),
        }

    def dump_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)


@dataclass(eq=False)
class PointObservations:
    """Map points seen from one keyframe, in that keyframe's body frame."""

    point_ids: np.ndarray
    descriptor_ids: np.ndarray
    track_ids: np.ndarray
    positions: np.ndarray


@dataclass(eq=False)
class Frame:
    frame_id: int
    detections: list[list[Detection]]
    odometry: Pose
    camera_features: list[np.ndarray]
    points: PointObservations

    def all_detections(self) -> list[Detection]:
        return [d for cam in self.detections for d in cam]


# ---------------------------------------------------------------------------
# world generation

def make_rig(cfg: SimConfig) -> CameraRig:
    c = cfg.camera
    intr = CameraIntrinsics(c.fx, c.fy, c.cx, c.cy, c.xi)
    intrinsics, extrinsics = [], []
    for i in range(c.n_cameras):
        psi = 2 * np.pi * i / c.n_cameras
        z = np.array([np.cos(psi), np.sin(psi), 0.0])
        x = np.array([np.sin(psi), -np.cos(psi), 0.0])
        y = np.array([0.0, 0.0, -1.0])
        R_cb = np.stack([x, y, z])
        intrinsics.append(intr)
        extrinsics.append(Pose(R_cb, -R_cb @ (c.mount_radius * z)))
    return CameraRig(tuple(intrinsics), tuple(extrinsics))


def _path_and_roads(cfg: SimConfig):
    t = cfg.trajectory
    W = np.asarray(t.waypoints, dtype=float).reshape(-1, 2)
    if len(W) < 3:
        raise InfeasibleConfig("closed-loop trajectory needs at least 3 waypoints")
    loop = np.vstack([W, W[:1]])
    n_seg = len(W)
    n_roads = max(1, min(t.n_roads, n_seg))
    bounds = np.linspace(0, n_seg, n_roads + 1).round().astype(int)
    roads = [loop[bounds[i]:bounds[i + 1] + 1] for i in range(n_roads)]
    if t.mode == "loop":
        path = loop
    else:
        d0 = W[0] - W[1]
        d0 = d0 / np.linalg.norm(d0)
        stem_start = W[0] + t.stem_length * d0
        path = np.vstack([stem_start, loop, stem_start])
        roads.append(np.vstack([stem_start, W[0]]))
    return path, roads, t.mode == "loop"


def _sample_path(path: np.ndarray, s: np.ndarray, wrap: bool):
    seg = np.diff(path, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    total = cum[-1]
    if wrap:
        s = np.mod(s, total)
    elif np.any(s > total + 1e-9):
        raise InfeasibleConfig("trajectory shorter than n_keyframes * keyframe_spacing")
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens) - 1)
    frac = (s - cum[idx]) / lens[idx]
    pos = path[idx] + frac[:, None] * seg[idx]
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    return pos, yaw


def _road_frame(roads, rng):
    """Random point on the road network: (road id, position, unit tangent)."""
    lens = []
    for r in roads:
        lens.append(np.linalg.norm(np.diff(r, axis=0), axis=1))
    total = np.array([l.sum() for l in lens])
    rid = int(rng.choice(len(roads), p=total / total.sum()))
    s = rng.uniform(0, total[rid])
    cum = np.concatenate([[0.0], np.cumsum(lens[rid])])
    k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(lens[rid]) - 1))
    d = roads[rid][k + 1] - roads[rid][k]
    tangent = d / np.linalg.norm(d)
    return rid, roads[rid][k] + (s - cum[k]) * tangent, tangent


def _road_points(roads, spec, rng):
    pts = []
    for r in roads:
        for a, b in zip(r[:-1], r[1:]):
            d = b - a
            L = np.linalg.norm(d)
            tangent = d / L
            normal = np.array([-tangent[1], tangent[0]])
            n = int(np.floor(L * spec.density))
            for side in (-1.0, 1.0):
                s = np.sort(rng.uniform(0, L, n))
                lat = rng.uniform(spec.lateral_min, spec.lateral_max, n)
                h = rng.uniform(0.0, spec.height_max, n)
                xy = a + s[:, None] * tangent + side * lat[:, None] * normal
                pts.append(np.column_stack([xy, h]))
    return np.vstack(pts) if pts else np.zeros((0, 3))


def generate_world(cfg: SimConfig) -> GroundTruth:
    """Build roads, rig trajectory, ellipsoids, map points and embeddings from ``cfg``."""
    seed = cfg.seed
    t = cfg.trajectory
    if t.n_keyframes < 1 or t.keyframe_spacing <= 0:
        raise InfeasibleConfig("need at least one keyframe and positive spacing")
    path, roads2d, wrap = _path_and_roads(cfg)
    s = np.arange(t.n_keyframes) * t.keyframe_spacing
    pos, yaw = _sample_path(path, s, wrap)
    h = cfg.camera.mount_height
    rig_poses = [Pose.from_body(rot_z(y), [p[0], p[1], h]) for p, y in zip(pos, yaw)]

    # embeddings
    D = cfg.embedding.dim
    rng_e = _rng(seed, CH_EMBED)
    prototypes = {c: normalize(rng_e.normal(size=D)) for c in cfg.objects.classes}

    # objects
    oc = cfg.objects
    if oc.count < 0 or not oc.classes:
        raise InfeasibleConfig("object count must be >= 0 with at least one class")
    rng_o = _rng(seed, CH_OBJECTS)
    objects_raw = []
    tries = 0
    while len(objects_raw) < oc.count:
        tries += 1
        if tries > 2000 * max(oc.count, 1):
            raise InfeasibleConfig("could not place all objects; relax spacing or offsets")
        rid, base, tangent = _road_frame(roads2d, rng_o)
        normal = np.array([-tangent[1], tangent[0]])
        side = rng_o.choice([-1.0, 1.0])
        lat = rng_o.uniform(oc.lateral_min, oc.lateral_max)
        xy = base + side * lat * normal
        axes = rng_o.uniform(oc.semi_axis_min, oc.semi_axis_max, 3)
        obj_yaw = rng_o.uniform(-np.pi, np.pi)
        cls = oc.classes[int(rng_o.integers(len(oc.classes)))]
        dists = [polyline_distance(xy, r) for r in roads2d]
        if min(dists) < oc.lateral_min - 1e-9:
            continue
        if any(np.linalg.norm(xy - o[1][:2]) < oc.min_separation for o in objects_raw):
            continue
        center = np.array([xy[0], xy[1], axes[2]])
        objects_raw.append((rid, center, axes, obj_yaw, cls))

    rng_p = _rng(seed, CH_POINTS)
    world_pts = _road_points(roads2d, cfg.points, rng_p)
    point_object = [-1] * len(world_pts)
    objects = []
    obj_pts = []
    next_pid = len(world_pts)
    for k, (rid, center, axes, obj_yaw, cls) in enumerate(objects_raw):
        R = rot_z(obj_yaw)
        ell = EllipsoidParams(center, R, axes)
        emb = normalize(prototypes[cls] + cfg.embedding.sigma_instance * rng_e.normal(size=D))
        pids = []
        for _ in range(oc.points_per_object // 2):
            u = normalize(rng_p.normal(size=3))
            off = R @ (axes * u)
            for p in (center + off, center - off):
                obj_pts.append(p)
                point_object.append(k)
                pids.append(next_pid)
                next_pid += 1
        objects.append(GTObject(k, cls, ell, emb, rid, tuple(pids)))
    points = np.vstack([world_pts, np.asarray(obj_pts).reshape(-1, 3)])

    # smooth place-appearance field for image-level features
    lo = np.min(np.vstack(roads2d), axis=0) - 30.0
    hi = np.max(np.vstack(roads2d), axis=0) + 30.0
    sp = cfg.embedding.place_spacing
    gx, gy = np.meshgrid(np.arange(lo[0], hi[0] + sp, sp), np.arange(lo[1], hi[1] + sp, sp))
    rng_pl = _rng(seed, CH_PLACE)
    anchors = np.column_stack([gx.ravel(), gy.ravel()]) + rng_pl.uniform(-sp / 3, sp / 3, (gx.size, 2))
    vectors = rng_pl.normal(size=(len(anchors), D))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)

    roads = [np.column_stack([r, np.zeros(len(r))]) for r in roads2d]
    gt = GroundTruth(make_rig(cfg), rig_poses, objects, prototypes, roads, points,
                     np.asarray(point_object, dtype=int), anchors, vectors)
    centers = np.array([p.center for p in rig_poses])
    dist = np.linalg.norm(points[None, :, :] - centers[:, None, :], axis=2)
    gt.point_visible = dist <= cfg.points.max_range
    return gt


# ---------------------------------------------------------------------------
# per-frame simulation

def visible_objects(gt: GroundTruth, cfg: SimConfig, body: Pose, camera_id: int):
    """Yield (object, exact ellipse) for ellipsoids detectable by one camera."""
    cam = gt.rig.extrinsics[camera_id] @ body
    cos_fov = np.cos(np.radians(cfg.camera.fov_half_deg))
    for obj in gt.objects:
        pc = cam.apply(obj.ellipsoid.center)
        dist = np.linalg.norm(pc)
        if dist > cfg.camera.max_range or pc[2] <= obj.ellipsoid.semi_axes.max():
            continue
        if pc[2] / dist < cos_fov:
            continue
        try:
            g = conic_to_gaussian(project_quadric(obj.ellipsoid, cam))
        except GeometryError:
            continue
        yield obj, g


def _spd_noise(S: np.ndarray, E: np.ndarray) -> np.ndarray:
    M = expm(E)
    return M @ S @ M.T


def _place_value(gt: GroundTruth, xy, length):
    d2 = np.sum((gt.place_anchors - xy) ** 2, axis=1)
    w = np.exp(-d2 / (2 * length ** 2))
    return w @ gt.place_vectors


def odometry_poses(gt: GroundTruth, cfg: SimConfig, upto: int | None = None) -> list[Pose]:
    """Drifting odometry trajectory (world-to-body), starting exactly at the first GT pose."""
    n = gt.n_frames if upto is None else upto + 1
    nz = cfg.noise
    T = np.linalg.inv(gt.rig_poses[0].matrix())
    out = [Pose.from_matrix(np.linalg.inv(T))]
    for k in range(1, n):
        A = np.linalg.inv(gt.rig_poses[k - 1].matrix())
        B = np.linalg.inv(gt.rig_poses[k].matrix())
        delta = np.linalg.inv(A) @ B
        dist = np.linalg.norm(delta[:3, 3])
        rng = _rng(cfg.seed, CH_ODOM, k)
        dt = rng.normal(size=3) * nz.odom_drift * dist
        dt[2] *= 0.1
        dyaw = rng.normal() * nz.odom_rot_drift * dist + nz.odom_rot_drift * dist
        noise = np.eye(4)
        noise[:3, :3] = so3_exp([0.0, 0.0, dyaw])
        noise[:3, 3] = dt
        T = T @ delta @ noise
        out.append(Pose.from_matrix(np.linalg.inv(T)))
    return out


def _point_track_ids(gt: GroundTruth, frame_id: int, ids: np.ndarray) -> np.ndarray:
    vis = gt.point_visible
    out = np.empty(len(ids), dtype=np.int64)
    for n, p in enumerate(ids):
        start = frame_id
        while start > 0 and vis[start - 1, p]:
            start -= 1
        out[n] = int(p) * 100000 + start
    return out


def simulate_frame(gt: GroundTruth, cfg: SimConfig, frame_id: int, odometry: Pose | None = None) -> Frame:
    """Noisy detections, odometry, image-level features and point observations for one keyframe.

    ``odometry`` may pass the precomputed drifting pose to avoid re-integrating it.
    """
    if not 0 <= frame_id < gt.n_frames:
        raise IndexError(f"frame {frame_id} outside trajectory of {gt.n_frames} keyframes")
    seed = cfg.seed
    nz = cfg.noise
    emb = cfg.embedding
    body = gt.rig_poses[frame_id]
    n_obj = len(gt.objects)
    classes = list(gt.prototypes)

    detections = []
    cam_features = []
    for c in range(len(gt.rig)):
        r_mu, r_sig, r_drop = _rng(seed, CH_MU, frame_id, c), _rng(seed, CH_SIGMA, frame_id, c), _rng(seed, CH_DROP, frame_id, c)
        r_hint, r_view, r_fp = _rng(seed, CH_HINT, frame_id, c), _rng(seed, CH_VIEW, frame_id, c), _rng(seed, CH_FP, frame_id, c)
        dets = []
        feat = np.zeros(emb.dim)
        for obj, g in visible_objects(gt, cfg, body, c):
            mu = g.mu + nz.sigma_mu * r_mu.normal(size=2)
            a, b, d = nz.sigma_sigma * r_sig.normal(size=3)
            sigma = _spd_noise(g.sigma, np.array([[a, b], [b, d]]))
            dropped = r_drop.uniform() < nz.p_drop
            hint = obj.object_id
            if r_hint.uniform() < nz.p_corrupt and n_obj > 1:
                other = int(r_hint.integers(n_obj - 1))
                hint = other if other < obj.object_id else other + 1
            views = tuple(normalize(obj.embedding + s * emb.sigma_e * r_view.normal(size=emb.dim))
                          for s in emb.view_noise_scale)
            spawn_fp = r_fp.uniform() < nz.fp_rate
            fp_draw = r_fp.uniform(size=6)
            feat += min(1.0, 10.0 * g.area) * obj.embedding
            if dropped:
                continue
            dets.append(Detection(
                c, frame_id, GaussianEllipse(mu, sigma), obj.class_label,
                fuse_view_features(*views, emb.fusion_weights), hint, obj.object_id, views,
                obj.point_ids))
            if spawn_fp:
                dets.append(_false_positive(gt, cfg, frame_id, c, len(dets), fp_draw, r_fp, classes))
        detections.append(dets)

        # image-level feature of the whole view
        cam = gt.rig.extrinsics[c] @ body
        look = cam.center + 10.0 * cam.R[2]
        feat = feat + _place_value(gt, look[:2], emb.place_length)
        r_cf = _rng(seed, CH_CAMFEAT, frame_id, c)
        feat = feat + nz.sigma_cam * r_cf.normal(size=emb.dim) * max(np.linalg.norm(feat), 1e-12)
        cam_features.append(normalize(feat))

    odom = odometry_poses(gt, cfg, frame_id)[frame_id] if odometry is None else odometry

    ids = np.flatnonzero(gt.point_visible[frame_id])
    r_pt = _rng(seed, CH_POINT_OBS, frame_id)
    pos = body.apply(gt.points[ids]) + nz.sigma_point * r_pt.normal(size=(len(ids), 3))
    desc = ids.copy()
    flip = r_pt.uniform(size=len(ids)) < nz.p_point_outlier
    n_pts = len(gt.points)
    repl = r_pt.integers(0, n_pts - 1, size=len(ids)) if n_pts > 1 else np.zeros(len(ids), dtype=int)
    repl = np.where(repl >= ids, repl + 1, repl)
    desc[flip] = repl[flip]
    points = PointObservations(ids, desc, _point_track_ids(gt, frame_id, ids), pos)
    return Frame(frame_id, detections, odom, cam_features, points)


def _false_positive(gt, cfg, frame_id, camera_id, idx, draw, rng, classes) -> Detection:
    emb = cfg.embedding
    mu = (draw[:2] * 2 - 1) * 1.2
    alpha = 0.02 + 0.18 * draw[2]
    beta = alpha * (0.5 + 0.5 * draw[3])
    theta = (draw[4] - 0.5) * np.pi
    cls = classes[min(int(draw[5] * len(classes)), len(classes) - 1)]
    base = gt.prototypes[cls]
    views = tuple(normalize(base + s * emb.sigma_e * rng.normal(size=emb.dim)) for s in emb.view_noise_scale)
    hint = -(frame_id * 10000 + camera_id * 1000 + idx + 1)
    return Detection(camera_id, frame_id, GaussianEllipse.from_axes(mu, alpha, beta, theta), cls,
                     fuse_view_features(*views, emb.fusion_weights), hint, None, views, ())


def simulate_run(gt: GroundTruth, cfg: SimConfig) -> list[Frame]:
    odom = odometry_poses(gt, cfg)
    return [simulate_frame(gt, cfg, k, odom[k]) for k in range(gt.n_frames)]
