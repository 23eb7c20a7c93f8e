"""Model assembly: RGB-D lifting, 3D conv encoder-decoder, implicit query heads."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .featuregrid import GridSpec, VoxelFeatureGrid, lift_view, sample_world
from .geometry import CameraIntrinsics, RigidTransform, project_points, unproject_depth_map

FULL_PLAN = "4-2-64,4-2-128,4-2-256,4-0.5-128,4-0.5-64,1-1-32"
DESK_PLAN = "4-2-16,4-2-32,4-0.5-16,4-0.5-16,1-1-32"
TINY_PLAN = "4-2-4,4-2-8,4-0.5-4,4-0.5-4,1-1-8"

HEADS = {"feat": 32, "occ": 1, "rgb": 3}
INPUT_CHANNELS = 4


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    stride: float
    channels: int

    @property
    def kind(self) -> str:
        if self.stride == 2:
            return "down"
        if self.stride == 0.5:
            return "up"
        if self.stride == 1:
            return "same"
        raise ValueError(f"unsupported stride {self.stride}")


def parse_plan(plan: str) -> list[LayerSpec]:
    """Parse ``"k-s-c, k-s-c, ..."`` (kernel-stride-channels; stride 0.5 = upsample)."""
    layers = []
    for tok in re.split(r"[,\s]+", plan.strip()):
        if not tok:
            continue
        k, s, c = tok.split("-")
        layer = LayerSpec(int(k), float(s), int(c))
        layer.kind  # validates stride
        layers.append(layer)
    if not layers:
        raise ValueError("empty channel plan")
    return layers


@dataclass(frozen=True)
class ModelConfig:
    channel_plan: str = DESK_PLAN
    hidden: int = 32
    n_blocks: int = 5
    feature_dim: int = 32
    leaky_slope: float = 0.01
    seed: int = 0

    @property
    def layers(self) -> list[LayerSpec]:
        return parse_plan(self.channel_plan)

    @property
    def input_scale(self) -> int:
        """How much finer the lifted input grid is than the output map."""
        kinds = [l.kind for l in self.layers]
        diff = kinds.count("down") - kinds.count("up")
        if diff < 0:
            raise ValueError("channel plan upsamples more than it downsamples")
        return 2**diff


@dataclass
class FeatureCloud:
    points: np.ndarray  # (n, 3)
    features: np.ndarray  # (n, F)
    source: str = "top_down"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.points) != len(self.features):
            raise ValueError("points and features differ in length")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask) -> "FeatureCloud":
        return FeatureCloud(self.points[mask], self.features[mask], self.source)


@dataclass
class CoCoNet:
    config: ModelConfig = field(default_factory=ModelConfig)
    params: ParameterStore = field(default_factory=ParameterStore)

    def __post_init__(self):
        if not len(self.params):
            self._init_params()

    # -- parameters --------------------------------------------------------

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        layers = cfg.layers
        if layers[-1].channels != cfg.feature_dim:
            raise ValueError("last layer of the channel plan must output feature_dim channels")
        store = self.params
        cin = INPUT_CHANNELS
        skip_channels = {0: INPUT_CHANNELS}  # keyed by downsampling level
        level = 0
        for i, layer in enumerate(layers):
            k = layer.kernel
            cout = layer.channels
            if layer.kind == "up":
                # transposed kernel is (k, k, k, cin, cout) with fan computed on the adjoint
                store.add(f"enc.{i}.w", ad.glorot_uniform(rng, (k, k, k, cin, cout), k**3 * cin // 8, k**3 * cout // 8))
                level -= 1
                cat = cout + skip_channels[level]
                store.add(f"enc.{i}.merge", ad.glorot_uniform(rng, (1, 1, 1, cat, cout), cat, cout))
            else:
                store.add(f"enc.{i}.w", ad.glorot_uniform(rng, (k, k, k, cin, cout), k**3 * cin, k**3 * cout))
                if layer.kind == "down":
                    level += 1
                    skip_channels[level] = cout
            store.add(f"enc.{i}.b", np.zeros(cout))
            cin = cout
        h = cfg.hidden
        f = cfg.feature_dim
        for head, out_dim in HEADS.items():
            if head == "feat":
                out_dim = cfg.feature_dim
            store.add(f"{head}.pos.w", ad.glorot_uniform(rng, (3, h), 3, h))
            store.add(f"{head}.pos.b", np.zeros(h))
            for j in range(cfg.n_blocks):
                store.add(f"{head}.fc{j}.w", ad.glorot_uniform(rng, (f, h), f, h))
                store.add(f"{head}.fc{j}.b", np.zeros(h))
                store.add(f"{head}.rn{j}.w1", ad.glorot_uniform(rng, (h, h), h, h))
                store.add(f"{head}.rn{j}.b1", np.zeros(h))
                store.add(f"{head}.rn{j}.w2", ad.glorot_uniform(rng, (h, h), h, h))
                store.add(f"{head}.rn{j}.b2", np.zeros(h))
            store.add(f"{head}.out.w", ad.glorot_uniform(rng, (h, out_dim), h, out_dim))
            store.add(f"{head}.out.b", np.zeros(out_dim))

    def p(self, name: str) -> Tensor:
        return self.params[name]

    # -- encoder -----------------------------------------------------------

    def encode_volume(self, volume: np.ndarray, spec: GridSpec) -> VoxelFeatureGrid:
        """Run the encoder-decoder on a lifted (W, H, D, 4) volume."""
        cfg = self.config
        x = Tensor(volume)
        skips = {0: x}
        level = 0
        layers = cfg.layers
        h = x
        for i, layer in enumerate(layers):
            w = self.p(f"enc.{i}.w")
            b = self.p(f"enc.{i}.b")
            last = i == len(layers) - 1
            if layer.kind == "down":
                h = _bias_act(ad.conv3d(h, w, 2), b, cfg.leaky_slope, act=not last)
                level += 1
                skips[level] = h
            elif layer.kind == "up":
                h = ad.conv3d(h, w, 2, transposed=True)
                level -= 1
                h = ad.concat([h, skips[level]], axis=-1)
                h = _bias_act(ad.conv3d(h, self.p(f"enc.{i}.merge"), 1), b, cfg.leaky_slope, act=not last)
            else:
                h = _bias_act(ad.conv3d(h, w, 1), b, cfg.leaky_slope, act=not last)
        if h.shape[:3] != spec.resolution:
            raise ad.ShapeMismatch(f"encoder produced {h.shape[:3]}, grid expects {spec.resolution}")
        return VoxelFeatureGrid(spec, ad.l2_normalize(h))

    def lift(self, rgb, depth, k: CameraIntrinsics, cam_pose: RigidTransform, spec: GridSpec) -> np.ndarray:
        return lift_view(rgb, depth, k, cam_pose, spec.scaled(self.config.input_scale))

    def encode_scene(self, rgb, depth, k: CameraIntrinsics, cam_pose: RigidTransform, spec: GridSpec) -> VoxelFeatureGrid:
        """Lift a registered RGB-D image and encode it into the feature map M."""
        return self.encode_volume(self.lift(rgb, depth, k, cam_pose, spec), spec)

    def encode_view(self, view, spec: GridSpec, cam_pose: RigidTransform | None = None) -> VoxelFeatureGrid:
        pose = RigidTransform.identity() if cam_pose is None else cam_pose
        return self.encode_scene(view.rgb, view.depth, view.intrinsics, pose, spec)

    # -- implicit heads ----------------------------------------------------

    def head(self, name: str, grid: VoxelFeatureGrid, points: np.ndarray) -> Tensor:
        """Raw head output (pre-activation) at world points of the grid's frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        c, _ = sample_world(grid, pts)
        pos = Tensor(grid.spec.normalized(pts))
        net = ad.linear(pos, self.p(f"{name}.pos.w"), self.p(f"{name}.pos.b"))
        for j in range(self.config.n_blocks):
            net = ad.add(net, ad.linear(c, self.p(f"{name}.fc{j}.w"), self.p(f"{name}.fc{j}.b")))
            net = self._resblock(name, j, net)
        return ad.linear(ad.relu(net), self.p(f"{name}.out.w"), self.p(f"{name}.out.b"))

    def _resblock(self, name: str, j: int, x: Tensor) -> Tensor:
        h = ad.linear(ad.relu(x), self.p(f"{name}.rn{j}.w1"), self.p(f"{name}.rn{j}.b1"))
        h = ad.linear(ad.relu(h), self.p(f"{name}.rn{j}.w2"), self.p(f"{name}.rn{j}.b2"))
        return ad.add(x, h)

    def query_feature(self, grid: VoxelFeatureGrid, points: np.ndarray) -> Tensor:
        return ad.l2_normalize(self.head("feat", grid, points))

    def query_occupancy_logits(self, grid: VoxelFeatureGrid, points: np.ndarray) -> Tensor:
        return ad.reshape(self.head("occ", grid, points), (-1,))

    def query_occupancy(self, grid: VoxelFeatureGrid, points: np.ndarray) -> Tensor:
        return ad.sigmoid(self.query_occupancy_logits(grid, points))

    def query_rgb(self, grid: VoxelFeatureGrid, points: np.ndarray) -> Tensor:
        return ad.sigmoid(self.head("rgb", grid, points))


def _bias_act(x: Tensor, b: Tensor, slope: float, act: bool) -> Tensor:
    y = ad.add_bias(x, b)
    return ad.leaky_relu(y, slope) if act else y


# ---------------------------------------------------------------------------
# point clouds


def query_in_chunks(fn, grid: VoxelFeatureGrid, points: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Evaluate a query head without recording gradients."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.zeros((0,))
    outs = []
    with ad.no_grad():
        for i in range(0, len(pts), chunk):
            outs.append(fn(grid, pts[i : i + chunk]).data)
    return np.concatenate(outs, axis=0)


def amodal_feature_cloud(model: CoCoNet, grid: VoxelFeatureGrid, query_points: np.ndarray,
                         source: str = "top_down") -> FeatureCloud:
    pts = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return FeatureCloud(pts, np.zeros((0, model.config.feature_dim)), source)
    return FeatureCloud(pts, query_in_chunks(model.query_feature, grid, pts), source)


def sample_query_points(spec: GridSpec, n: int, seed: int, mode: str = "uniform",
                        surface_points: np.ndarray | None = None, surface_fraction: float = 0.5) -> np.ndarray:
    """Query locations in the grid cuboid.

    ``surface_biased`` mixes uniform samples with visible surface points jittered
    by one voxel (Gaussian), clipped to the cuboid.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    lo = np.array(spec.world_min)
    hi = np.array(spec.world_max)
    if mode == "uniform" or surface_points is None or not len(surface_points):
        if mode not in ("uniform", "surface_biased"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        return rng.uniform(lo, hi, size=(n, 3))
    if mode != "surface_biased":
        raise ValueError(f"unknown sampling mode {mode!r}")
    n_surf = int(round(n * surface_fraction))
    uni = rng.uniform(lo, hi, size=(n - n_surf, 3))
    src = np.asarray(surface_points, dtype=np.float64)[rng.integers(len(surface_points), size=n_surf)]
    jit = src + rng.normal(size=src.shape) * spec.voxel_size
    return np.concatenate([uni, np.clip(jit, lo, hi)], axis=0)


def surface_points(view, cam_pose: RigidTransform | None = None) -> np.ndarray:
    """Visible depth points of a view, optionally mapped out of the camera frame."""
    pts, _ = unproject_depth_map(view.depth, view.intrinsics)
    return pts if cam_pose is None else cam_pose.apply(pts)


@dataclass
class FeatureImage:
    features: np.ndarray  # (H, W, F)
    depth: np.ndarray  # (H, W), 0 where empty
    mask: np.ndarray  # (H, W) bool


def project_feature_cloud(cloud: FeatureCloud, cam_pose: RigidTransform, k: CameraIntrinsics) -> FeatureImage:
    """Splat point features into the image of a camera, nearest point per pixel.

    ``cam_pose`` maps camera coordinates into the cloud's frame.
    """
    dim = cloud.features.shape[1] if cloud.features.ndim == 2 else 0
    feats = np.zeros((k.height, k.width, dim))
    depth = np.zeros((k.height, k.width))
    mask = np.zeros((k.height, k.width), dtype=bool)
    if not len(cloud):
        return FeatureImage(feats, depth, mask)
    cam = cam_pose.inverse().apply(cloud.points)
    uv, valid = project_points(cam, k)
    col = np.floor(np.where(valid, uv[:, 0], -1)).astype(np.int64)
    row = np.floor(np.where(valid, uv[:, 1], -1)).astype(np.int64)
    ok = valid & (col >= 0) & (col < k.width) & (row >= 0) & (row < k.height)
    idx = np.nonzero(ok)[0]
    order = idx[np.lexsort((idx, cam[idx, 2]))]  # nearest first, stable on index
    lin = row[order] * k.width + col[order]
    _, first = np.unique(lin, return_index=True)
    win = order[first]
    feats[row[win], col[win]] = cloud.features[win]
    depth[row[win], col[win]] = cam[win, 2]
    mask[row[win], col[win]] = True
    return FeatureImage(feats, depth, mask)


def pca_rgb(features: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Compress (..., F) features to (..., 3) colors in [0, 1] via their top-3 principal components."""
    f = np.asarray(features, dtype=np.float64)
    shape = f.shape[:-1]
    flat = f.reshape(-1, f.shape[-1])
    sel = np.ones(len(flat), dtype=bool) if mask is None else np.asarray(mask).reshape(-1)
    out = np.zeros((len(flat), 3))
    if sel.sum() == 0:
        return out.reshape(*shape, 3)
    x = flat[sel]
    centered = x - x.mean(axis=0)
    if np.allclose(centered, 0.0):
        out[sel] = 0.5
        return out.reshape(*shape, 3)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:3]
    proj = centered @ comps.T
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo = proj.min(axis=0)
    span = proj.max(axis=0) - lo
    span[span < 1e-12] = 1.0
    out[sel] = (proj - lo) / span
    return out.reshape(*shape, 3)
