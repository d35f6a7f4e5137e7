"""Dataclass configuration tree and YAML loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .association import AssociationConfig
from .quadric import EstimatorConfig
from .semantic import SemanticConfig


class ConfigError(ValueError):
    pass


DEFAULT_CLASSES = ("car", "tree", "traffic_sign", "trash_bin", "bench")


@dataclass(frozen=True)
class CameraSpec:
    n_cameras: int = 4
    fx: float = 350.0
    fy: float = 350.0
    cx: float = 640.0
    cy: float = 480.0
    xi: float = 0.8
    mount_radius: float = 1.0
    mount_height: float = 1.5
    fov_half_deg: float = 60.0
    max_range: float = 20.0


@dataclass(frozen=True)
class TrajectorySpec:
    # "loop": closed circuit. "reverse": drive in along a stem, around the loop,
    # and back out along the stem facing the opposite way (needs ~65 keyframes).
    mode: str = "loop"
    waypoints: tuple = ((0.0, 0.0), (60.0, 0.0), (60.0, 40.0), (0.0, 40.0))
    keyframe_spacing: float = 3.7
    n_keyframes: int = 60
    stem_length: float = 20.0
    n_roads: int = 4


@dataclass(frozen=True)
class ObjectSpec:
    count: int = 25
    classes: tuple = DEFAULT_CLASSES
    semi_axis_min: float = 0.5
    semi_axis_max: float = 2.0
    lateral_min: float = 4.0
    lateral_max: float = 10.0
    min_separation: float = 4.0
    points_per_object: int = 8


@dataclass(frozen=True)
class NoiseSpec:
    sigma_mu: float = 0.01
    sigma_sigma: float = 0.05
    p_drop: float = 0.1
    fp_rate: float = 0.05
    p_corrupt: float = 0.1
    odom_drift: float = 0.01
    odom_rot_drift: float = 0.0005
    sigma_point: float = 0.01
    p_point_outlier: float = 0.2
    sigma_cam: float = 0.01


@dataclass(frozen=True)
class EmbeddingSpec:
    dim: int = 64
    sigma_e: float = 0.01
    sigma_instance: float = 0.01
    view_noise_scale: tuple = (3.0, 2.0, 1.0)
    fusion_weights: tuple = (0.25, 0.25, 0.5)
    place_length: float = 12.0
    place_spacing: float = 15.0


@dataclass(frozen=True)
class PointSpec:
    density: float = 1.5
    lateral_min: float = 10.0
    lateral_max: float = 16.0
    height_max: float = 6.0
    max_range: float = 25.0


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    camera: CameraSpec = field(default_factory=CameraSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    objects: ObjectSpec = field(default_factory=ObjectSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    points: PointSpec = field(default_factory=PointSpec)

    def __post_init__(self):
        n = self.noise
        for name in ("p_drop", "fp_rate", "p_corrupt", "p_point_outlier"):
            v = getattr(n, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"noise.{name}={v} is not a probability")
        for name in ("sigma_mu", "sigma_sigma", "odom_drift", "odom_rot_drift", "sigma_point", "sigma_cam"):
            if getattr(n, name) < 0:
                raise ConfigError(f"noise.{name} must be >= 0")
        if self.embedding.sigma_e < 0 or self.embedding.sigma_instance < 0:
            raise ConfigError("embedding noise must be >= 0")
        if self.camera.n_cameras < 1:
            raise ConfigError("need at least one camera")
        if self.trajectory.mode not in ("loop", "reverse"):
            raise ConfigError(f"unknown trajectory mode {self.trajectory.mode!r}")

    def noise_free(self) -> "SimConfig":
        zero = NoiseSpec(**{f.name: 0.0 for f in dataclasses.fields(NoiseSpec)})
        emb = dataclasses.replace(self.embedding, sigma_e=0.0)
        return dataclasses.replace(self, noise=zero, embedding=emb)


@dataclass(frozen=True)
class LoopConfig:
    alpha: float = 0.4
    beta: float = 0.6
    min_covisible_points: int = 30
    ransac_iters: int = 200
    inlier_dist: float = 0.5
    min_inliers: int = 6
    min_temporal_gap: int = 50
    fallback_threshold: float = 0.85
    max_candidates: int = 3
    merge_dist: float = 1.5
    merge_cos: float = 0.8
    loop_information: float = 10.0
    gn_iterations: int = 20
    cooldown: int = 5  # keyframes to skip detection after an accepted loop
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ConfigError("alpha and beta must be non-negative and sum to 1")


@dataclass(frozen=True)
class PipelineConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    loop_closure: bool = True
    reoptimize_every: int = 5
    merge_every_frame: bool = True

    def __post_init__(self):
        if self.reoptimize_every < 1:
            raise ConfigError("reoptimize_every must be >= 1")

    @property
    def seed(self) -> int:
        return self.sim.seed

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, sim=dataclasses.replace(self.sim, seed=int(seed)),
                                   loop=dataclasses.replace(self.loop, seed=int(seed)))


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        if isinstance(data, list):
            return tuple(tuple(x) if isinstance(x, list) else x for x in data)
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "")


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return config_from_dict(data or {})


def _plain(x):
    if isinstance(x, (tuple, list)):
        return [_plain(v) for v in x]
    return x


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = config_to_dict(v) if dataclasses.is_dataclass(v) else _plain(v)
    return out
