import dataclasses

import numpy as np
import pytest

from mcoslam.config import NoiseSpec, ObjectSpec, SimConfig, TrajectorySpec
from mcoslam.geometry import polyline_distance
from mcoslam.simulation import (
    InfeasibleConfig,
    generate_world,
    odometry_poses,
    simulate_frame,
    simulate_run,
    visible_objects,
)


def only_noise(**kw) -> SimConfig:
    zero = SimConfig().noise_free()
    return dataclasses.replace(zero, noise=dataclasses.replace(zero.noise, **kw))


@pytest.fixture(scope="module")
def world():
    cfg = SimConfig()
    return cfg, generate_world(cfg)


def test_world_is_deterministic(world):
    cfg, gt = world
    assert generate_world(cfg).to_dict() == gt.to_dict()
    assert generate_world(dataclasses.replace(cfg, seed=1)).to_dict() != gt.to_dict()


def test_object_count_and_placement(world):
    cfg, gt = world
    assert len(gt.objects) == cfg.objects.count
    for o in gt.objects:
        d = min(polyline_distance(o.ellipsoid.center[:2], r[:, :2]) for r in gt.roads)
        assert cfg.objects.lateral_min - 1e-9 <= d <= cfg.objects.lateral_max + 1e-9
        assert o.ellipsoid.center[2] == pytest.approx(o.ellipsoid.semi_axes[2])  # resting on the ground
    centers = np.array([o.ellipsoid.center[:2] for o in gt.objects])
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=2) + np.eye(len(centers)) * 1e9
    assert gaps.min() >= cfg.objects.min_separation


def test_loop_trajectory_revisits_start(world):
    cfg, gt = world
    start = gt.rig_poses[0].center
    late = [p.center for p in gt.rig_poses[cfg.trajectory.n_keyframes // 2:]]
    assert min(np.linalg.norm(c - start) for c in late) < cfg.trajectory.keyframe_spacing


def test_reverse_trajectory_drives_back_out():
    cfg = SimConfig(trajectory=TrajectorySpec(mode="reverse", n_keyframes=65))
    gt = generate_world(cfg)
    first, last = gt.rig_poses[0], gt.rig_poses[-1]
    assert np.linalg.norm(first.center - last.center) < 10.0
    # the heading on the way out is opposite to the heading on the way in
    assert first.R[0] @ last.R[0] < -0.99
    assert len(gt.roads) == cfg.trajectory.n_roads + 1


def test_infeasible_configs():
    with pytest.raises(InfeasibleConfig):
        generate_world(SimConfig(trajectory=TrajectorySpec(waypoints=((0.0, 0.0), (1.0, 0.0)))))
    with pytest.raises(InfeasibleConfig):
        generate_world(SimConfig(trajectory=TrajectorySpec(mode="reverse", n_keyframes=200)))
    with pytest.raises(InfeasibleConfig):
        generate_world(SimConfig(objects=ObjectSpec(count=3, min_separation=1e4)))


def _stream(cfg, gt, frames):
    return [(d.camera_id, d.gt_id, d.track_hint, d.ellipse.mu.tobytes(), d.ellipse.sigma.tobytes(),
             d.embedding.tobytes()) for k in frames for d in simulate_frame(gt, cfg, k).all_detections()]


def test_detection_stream_is_bit_deterministic(world):
    cfg, gt = world
    assert _stream(cfg, gt, range(0, 60, 7)) == _stream(cfg, generate_world(cfg), range(0, 60, 7))


def test_noise_free_limit():
    cfg = SimConfig().noise_free()
    gt = generate_world(cfg)
    frames = simulate_run(gt, cfg)
    for f in frames[::5]:
        assert np.allclose(f.odometry.matrix(), gt.rig_poses[f.frame_id].matrix())
        for c, dets in enumerate(f.detections):
            exact = {o.object_id: g for o, g in visible_objects(gt, cfg, gt.rig_poses[f.frame_id], c)}
            assert sorted(d.gt_id for d in dets) == sorted(exact)
            for d in dets:
                assert np.array_equal(d.ellipse.mu, exact[d.gt_id].mu)
                assert np.allclose(d.ellipse.sigma, exact[d.gt_id].sigma, atol=1e-15)
                assert d.track_hint == d.gt_id


def test_full_dropout_gives_no_detections():
    cfg = only_noise(p_drop=1.0, fp_rate=1.0)
    gt = generate_world(cfg)
    assert all(len(simulate_frame(gt, cfg, k).all_detections()) == 0 for k in range(0, 60, 6))


def test_mu_noise_statistics():
    errs = []
    for seed in range(3):
        cfg = dataclasses.replace(only_noise(sigma_mu=0.01), seed=seed)
        gt = generate_world(cfg)
        for f in simulate_run(gt, cfg):
            for c, dets in enumerate(f.detections):
                exact = {o.object_id: g for o, g in visible_objects(gt, cfg, gt.rig_poses[f.frame_id], c)}
                errs += [d.ellipse.mu - exact[d.gt_id].mu for d in dets]
    errs = np.asarray(errs).ravel()
    assert len(errs) >= 2000  # 1000+ detections, two coordinates each
    assert abs(np.std(errs) / 0.01 - 1) < 0.15


def test_channels_are_independent():
    base = only_noise(sigma_mu=0.01)
    dropped = only_noise(sigma_mu=0.01, p_drop=0.5, p_corrupt=0.5)
    gt = generate_world(base)
    for k in (3, 17, 40):
        a = {(d.camera_id, d.gt_id): d.ellipse.mu for d in simulate_frame(gt, base, k).all_detections()}
        b = {(d.camera_id, d.gt_id): d.ellipse.mu for d in simulate_frame(gt, dropped, k).all_detections()}
        assert set(b) <= set(a)
        assert all(np.array_equal(a[key], b[key]) for key in b)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_detections_are_consistent(seed):
    cfg = SimConfig(seed=seed)
    gt = generate_world(cfg)
    n_fp = n_real = n_corrupt = 0
    for f in simulate_run(gt, cfg):
        for c, dets in enumerate(f.detections):
            cam = gt.rig.extrinsics[c] @ gt.rig_poses[f.frame_id]
            for d in dets:
                if d.gt_id is None:
                    n_fp += 1
                    continue
                n_real += 1
                n_corrupt += d.track_hint != d.gt_id
                obj = gt.object_by_id[d.gt_id]
                assert d.class_label == obj.class_label
                assert cam.apply(obj.ellipsoid.center)[2] > 0
                assert abs(np.linalg.norm(d.embedding) - 1) < 1e-12
    assert n_real > 300
    assert 0.05 < n_corrupt / n_real < 0.15
    assert 0.02 < n_fp / n_real < 0.09


def test_odometry_drift_scale():
    cfg = only_noise(odom_drift=0.01)
    gt = generate_world(cfg)
    odo = odometry_poses(gt, cfg)
    rel = []
    for k in range(1, gt.n_frames):
        # body motion between keyframes, expressed in the earlier body frame
        true = gt.rig_poses[k - 1].matrix() @ np.linalg.inv(gt.rig_poses[k].matrix())
        est = odo[k - 1].matrix() @ np.linalg.inv(odo[k].matrix())
        err = np.linalg.inv(true) @ est
        rel.append(err[:2, 3] / np.linalg.norm(true[:3, 3]))
    # planar translation noise is 1 % of the distance travelled per step
    assert abs(np.std(np.asarray(rel)) / 0.01 - 1) < 0.2
    assert np.allclose(odo[0].matrix(), gt.rig_poses[0].matrix())


def test_probability_validation():
    from mcoslam.config import ConfigError
    with pytest.raises(ConfigError):
        SimConfig(noise=NoiseSpec(p_drop=1.5))
    with pytest.raises(ConfigError):
        SimConfig(trajectory=TrajectorySpec(mode="zigzag"))


def test_frame_index_out_of_range(world):
    cfg, gt = world
    with pytest.raises(IndexError):
        simulate_frame(gt, cfg, gt.n_frames)
    with pytest.raises(IndexError):
        simulate_frame(gt, cfg, -1)
