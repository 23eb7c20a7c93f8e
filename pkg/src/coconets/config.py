"""Run configuration: nested sections with defaults, YAML loading and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any

import yaml

from .alignment import RansacConfig
from .coconet import DESK_PLAN, ModelConfig
from .contrastive import TrainConfig
from .featuregrid import GridSpec
from .geometry import CameraIntrinsics


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridSection:
    extent: float = 8.0  # cube edge, world units
    resolution: int = 32
    depth: float = 6.0  # cube center on the first camera's optical axis

    def spec(self) -> GridSpec:
        return GridSpec.centered((0.0, 0.0, self.depth), self.extent, self.resolution)


@dataclass(frozen=True)
class CameraSection:
    width: int = 64
    height: int = 64
    fov: float = 50.0  # horizontal, degrees
    distance: float = 6.0
    elevation_min: float = 10.0
    elevation_max: float = 60.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov)


@dataclass(frozen=True)
class DataSection:
    objects: int = 2
    placement_radius: float = 1.6
    train_scenes: int = 200
    views_per_scene: int = 6
    track_sequences: int = 50
    track_frames: int = 10
    occluded_share: float = 0.5  # share of sequences built around an occluder
    min_occlusion: float = 0.3
    speed_range: tuple[float, float] = (0.03, 0.08)  # per frame
    yaw_rate_max: float = 0.1  # radians per frame
    pose_noise: float = 0.0  # camera-pose error in recorded tracking frames
    align_pairs: int = 50
    align_yaw_max: float = 180.0  # degrees between the two cameras
    occ_views: int = 20
    match_pairs: int = 20


@dataclass(frozen=True)
class ModelSection:
    channel_plan: str = DESK_PLAN
    hidden: int = 32
    n_blocks: int = 5
    feature_dim: int = 32
    leaky_slope: float = 0.01

    def build(self, seed: int) -> ModelConfig:
        return ModelConfig(self.channel_plan, self.hidden, self.n_blocks, self.feature_dim, self.leaky_slope, seed)


@dataclass(frozen=True)
class RansacSection:
    iterations: int = 1000
    inlier_radius: float | None = None  # None: half a voxel of the grid
    similarity_floor: float = 0.0

    def build(self, grid: GridSection, seed: int) -> RansacConfig:
        radius = self.inlier_radius
        if radius is None:
            radius = 0.5 * float(min(grid.spec().voxel_size))
        return RansacConfig(self.iterations, 3, radius, self.similarity_floor, seed)


@dataclass(frozen=True)
class EvalSection:
    n_uniform: int = 4096  # amodal query budget per tracking / alignment cloud
    match_queries: int = 256
    occ_threshold: float = 0.5
    oracle: bool = False  # tracking with ground-truth correspondences
    dense_radius: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    grid: GridSection = field(default_factory=GridSection)
    camera: CameraSection = field(default_factory=CameraSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacSection = field(default_factory=RansacSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def model_config(self) -> ModelConfig:
        return self.model.build(self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def ransac_config(self) -> RansacConfig:
        return self.ransac.build(self.grid, self.seed)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict[str, Any] | None, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or 'root'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'root'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}".strip("."))
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'root'} section: {exc}") from exc


def from_dict(data: dict[str, Any] | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a YAML config (all keys optional) and apply dotted-key overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        data = loaded or {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(data)
