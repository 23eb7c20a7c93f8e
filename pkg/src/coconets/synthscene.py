"""Deterministic synthetic RGB-D data: primitive scenes, ray-cast rendering,
camera rigs, rigid-motion tracking sequences and a compact binary format.

World frame is Z-up. Depth maps store Z-depth in the camera frame, 0 where the
pixel ray hits nothing.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box3D, CameraIntrinsics, RigidTransform, compose, look_at, rot_z

LIGHT_DIR = np.array([0.4, -0.3, 0.866])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.2
T_MIN = 1e-9


class PlacementFailure(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box"
    pose: RigidTransform  # object -> world
    size: tuple[float, ...]  # (radius,) or half extents (x, y, z)
    albedo: tuple[float, float, float]
    instance_id: int

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        size = tuple(float(s) for s in np.atleast_1d(self.size))
        if self.kind == "sphere" and len(size) != 1:
            raise ValueError("sphere size is a single radius")
        if self.kind == "box" and len(size) != 3:
            raise ValueError("box size is three half extents")
        if min(size) <= 0:
            raise ValueError("primitive size must be positive")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "albedo", tuple(float(a) for a in self.albedo))

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def half_extents(self) -> np.ndarray:
        return np.full(3, self.size[0]) if self.kind == "sphere" else np.array(self.size)

    @property
    def bounding_radius(self) -> float:
        return float(self.size[0]) if self.kind == "sphere" else float(np.linalg.norm(self.size))

    def box(self) -> Box3D:
        return Box3D(self.center.copy(), self.half_extents, self.pose.rotation.copy())

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance (negative inside) at world points."""
        local = self.pose.inverse().apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if self.kind == "sphere":
            return np.linalg.norm(local, axis=-1) - self.size[0]
        q = np.abs(local) - np.array(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def moved(self, motion: RigidTransform) -> "Primitive":
        """Apply a world-frame rigid motion about the world origin."""
        return replace(self, pose=compose(motion, self.pose))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "rotation": self.pose.rotation.tolist(),
            "translation": self.pose.translation.tolist(),
            "size": list(self.size),
            "albedo": list(self.albedo),
            "instance_id": self.instance_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(
            d["kind"],
            RigidTransform(np.array(d["rotation"]), np.array(d["translation"])),
            tuple(d["size"]),
            tuple(d["albedo"]),
            int(d["instance_id"]),
        )


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        ids = [p.instance_id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be distinct")
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def get(self, instance_id: int) -> Primitive:
        for p in self.primitives:
            if p.instance_id == instance_id:
                return p
        raise KeyError(instance_id)

    def replace_primitive(self, prim: Primitive) -> "Scene":
        return replace(self, primitives=tuple(prim if p.instance_id == prim.instance_id else p for p in self.primitives))

    def sdf(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not self.primitives:
            return np.full(len(pts), np.inf)
        return np.min([p.sdf(pts) for p in self.primitives], axis=0)

    def inside(self, points: np.ndarray) -> np.ndarray:
        return self.sdf(points) <= 0.0

    def to_dict(self) -> dict:
        return {"background": list(self.background), "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(tuple(Primitive.from_dict(p) for p in d["primitives"]), tuple(d.get("background", (0, 0, 0))))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class ViewRecord:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), 0 = no hit
    intrinsics: CameraIntrinsics
    cam_pose: RigidTransform  # camera -> world
    instance: np.ndarray | None = field(default=None, compare=False)  # (H, W) ids, -1 = background

    def __post_init__(self):
        k = self.intrinsics
        if self.rgb.shape != (k.height, k.width, 3) or self.depth.shape != (k.height, k.width):
            raise ValueError("image dimensions do not match intrinsics")


@dataclass
class TrackingSequence:
    frames: list[ViewRecord]
    target_id: int
    object_motion: list[RigidTransform]  # world-frame motion of the target since frame 0
    boxes: list[Box3D]  # ground-truth target box per frame, world frame
    scenes: list[Scene] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def reference_pose(self) -> RigidTransform:
        return self.frames[0].cam_pose


# ---------------------------------------------------------------------------
# scene sampling


def _random_albedo(rng: np.random.Generator) -> tuple[float, float, float]:
    a = rng.uniform(0.1, 1.0, size=3)
    a[rng.integers(3)] = rng.uniform(0.75, 1.0)
    return tuple(float(x) for x in a)


def random_primitive(rng: np.random.Generator, center, instance_id: int, kind: str | None = None,
                     size_scale: float = 1.0) -> Primitive:
    kind = kind or ("sphere" if rng.random() < 0.5 else "box")
    yaw = rng.uniform(-math.pi, math.pi)
    if kind == "sphere":
        size = (rng.uniform(0.5, 0.9) * size_scale,)
        rot = np.eye(3)
    else:
        size = tuple(rng.uniform(0.35, 0.7, size=3) * size_scale)
        rot = rot_z(yaw)
    return Primitive(kind, RigidTransform(rot, np.asarray(center, dtype=np.float64)), size, _random_albedo(rng), instance_id)


def sample_scene(n_objects: int, seed: int, placement_radius: float = 2.0, height_range: float = 0.6,
                 max_tries: int = 10_000, margin: float = 0.05) -> Scene:
    """Non-overlapping random spheres and boxes around the world origin."""
    if n_objects < 1:
        raise ValueError("n_objects must be at least 1")
    rng = np.random.default_rng(seed)
    placed: list[Primitive] = []
    tries = 0
    while len(placed) < n_objects:
        tries += 1
        if tries > max_tries:
            raise PlacementFailure(f"could not place {n_objects} objects after {max_tries} attempts")
        rho = placement_radius * math.sqrt(rng.random())
        phi = rng.uniform(0, 2 * math.pi)
        center = np.array([rho * math.cos(phi), rho * math.sin(phi), rng.uniform(-height_range, height_range)])
        prim = random_primitive(rng, center, len(placed))
        if all(
            np.linalg.norm(prim.center - q.center) > prim.bounding_radius + q.bounding_radius + margin for q in placed
        ):
            placed.append(prim)
    return Scene(tuple(placed))


# ---------------------------------------------------------------------------
# ray casting


def pixel_rays(k: CameraIntrinsics, supersample: int = 1) -> np.ndarray:
    """Camera-frame ray directions with unit Z through (sub)pixel centers, (H*s, W*s, 3)."""
    s = supersample
    u = (np.arange(k.width * s) + 0.5) / s
    v = (np.arange(k.height * s) + 0.5) / s
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)


def _intersect_sphere(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float):
    oc = origin - center
    a = np.sum(dirs * dirs, axis=-1)
    b = np.sum(dirs * oc, axis=-1)
    c = oc @ oc - radius * radius
    disc = b * b - a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 > T_MIN, t0, t1)
    hit &= t > T_MIN
    return np.where(hit, t, np.inf)


def _intersect_box(origin: np.ndarray, dirs: np.ndarray, pose: RigidTransform, half: np.ndarray):
    inv = pose.inverse()
    o = inv.apply(origin)
    d = dirs @ inv.rotation.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = 1.0 / d
        t1 = (-half - o) * inv_d
        t2 = (half - o) * inv_d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = d == 0
    inside_slab = np.abs(o) <= half
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > T_MIN)
    t = np.where(t_near > T_MIN, t_near, t_far)
    return np.where(hit, t, np.inf)


def _normals(prim: Primitive, points_world: np.ndarray) -> np.ndarray:
    if prim.kind == "sphere":
        n = points_world - prim.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)
    local = prim.pose.inverse().apply(points_world)
    ratio = np.abs(local) / np.array(prim.size)
    axis = np.argmax(ratio, axis=-1)
    n_local = np.zeros_like(local)
    n_local[np.arange(len(local)), axis] = np.sign(local[np.arange(len(local)), axis])
    return prim.pose.apply_vector(n_local)


def cast(scene: Scene, origin_world: np.ndarray, dirs_world: np.ndarray):
    """Nearest hit parameter and primitive index per ray (inf / -1 when nothing is hit)."""
    shape = dirs_world.shape[:-1]
    dirs = dirs_world.reshape(-1, 3)
    best_t = np.full(len(dirs), np.inf)
    best_i = np.full(len(dirs), -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        if prim.kind == "sphere":
            t = _intersect_sphere(origin_world, dirs, prim.center, prim.size[0])
        else:
            t = _intersect_box(origin_world, dirs, prim.pose, np.array(prim.size))
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    return best_t.reshape(shape), best_i.reshape(shape)


def render_view(scene: Scene, cam_pose: RigidTransform, k: CameraIntrinsics) -> ViewRecord:
    """Ray-cast one pinhole view: Z-depth plus Lambert-shaded albedo."""
    rays_cam = pixel_rays(k).reshape(-1, 3)
    dirs_world = cam_pose.apply_vector(rays_cam)
    t, idx = cast(scene, cam_pose.translation, dirs_world)
    hit = idx >= 0
    depth = np.where(hit, t, 0.0)  # unit-Z camera rays: parameter == Z-depth
    rgb = np.tile(np.array(scene.background, dtype=np.float64), (len(t), 1))
    inst = np.full(len(t), -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        sel = idx == i
        if not np.any(sel):
            continue
        pts = cam_pose.translation + dirs_world[sel] * t[sel, None]
        shade = np.maximum(_normals(prim, pts) @ LIGHT_DIR, AMBIENT)
        rgb[sel] = np.asarray(prim.albedo) * shade[:, None]
        inst[sel] = prim.instance_id
    h, w = k.height, k.width
    return ViewRecord(rgb.reshape(h, w, 3), depth.reshape(h, w), k, cam_pose, inst.reshape(h, w))


# ---------------------------------------------------------------------------
# cameras


def sample_camera_poses(mode: str = "random", n: int = 8, seed: int = 0, distance: float = 6.0,
                        center=(0.0, 0.0, 0.0), elevation_range=(10.0, 60.0),
                        azimuth_step: float = 45.0, elevation_step: float = 20.0,
                        max_elevation: float = 80.0) -> list[RigidTransform]:
    """Look-at camera poses around ``center``.

    ``hemisphere`` enumerates azimuths [0, 360) and elevations [0, max_elevation]
    on a regular grid; ``random`` draws ``n`` poses with uniform azimuth and
    elevation within ``elevation_range`` (degrees).
    """
    center = np.asarray(center, dtype=np.float64)

    def pose(az_deg: float, el_deg: float) -> RigidTransform:
        az, el = math.radians(az_deg), math.radians(el_deg)
        eye = center + distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        return look_at(eye, center)

    if mode == "hemisphere":
        azs = np.arange(0.0, 360.0, azimuth_step)
        els = np.arange(0.0, max_elevation + 1e-9, elevation_step)
        return [pose(a, e) for e in els for a in azs]
    if mode == "random":
        rng = np.random.default_rng(seed)
        return [pose(rng.uniform(0, 360), rng.uniform(*elevation_range)) for _ in range(n)]
    raise ValueError(f"unknown camera mode {mode!r}")


# ---------------------------------------------------------------------------
# tracking sequences


@dataclass(frozen=True)
class MotionSpec:
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # world units per frame
    yaw_rate: float = 0.0  # radians per frame about the object's vertical axis
    noise: float = 0.0  # std of per-frame translation jitter
    camera_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # egomotion, per frame
    pose_noise: float = 0.0  # std of the translation error in recorded (not rendered) camera poses


def make_tracking_sequence(scene: Scene, target_id: int, motion: MotionSpec, cam_pose: RigidTransform,
                           k: CameraIntrinsics, n_frames: int = 10, seed: int = 0) -> TrackingSequence:
    """Render ``n_frames`` views while the target moves rigidly about its own center."""
    target0 = scene.get(target_id)
    rng = np.random.default_rng(seed)
    c0 = target0.center
    frames, motions, boxes, scenes = [], [], [], []
    offset = np.zeros(3)
    for t in range(n_frames):
        if t > 0 and motion.noise > 0:
            offset = offset + rng.normal(scale=motion.noise, size=3)
        shift = np.asarray(motion.velocity) * t + offset
        rot = rot_z(motion.yaw_rate * t)
        # rotate about c0, then translate
        m = RigidTransform(rot, c0 - rot @ c0 + shift)
        moved = scene.replace_primitive(target0.moved(m))
        cam = RigidTransform(cam_pose.rotation, cam_pose.translation + np.asarray(motion.camera_velocity) * t)
        view = render_view(moved, cam, k)
        if t > 0 and motion.pose_noise > 0:
            err = rng.normal(scale=motion.pose_noise, size=3)
            view = replace(view, cam_pose=RigidTransform(cam.rotation, cam.translation + err))
        frames.append(view)
        motions.append(m)
        boxes.append(moved.get(target_id).box())
        scenes.append(moved)
    return TrackingSequence(frames, target_id, motions, boxes, scenes)


def occlusion_ratio(scene: Scene, target_id: int, cam_pose: RigidTransform, k: CameraIntrinsics) -> float:
    """Fraction of the target's silhouette hidden by other primitives."""
    alone = render_view(Scene((scene.get(target_id),)), cam_pose, k)
    full = render_view(scene, cam_pose, k)
    total = int((alone.instance == target_id).sum())
    if total == 0:
        return 1.0
    return 1.0 - int((full.instance == target_id).sum()) / total


# ---------------------------------------------------------------------------
# binary dataset: "CCD1", u16 version, u32 count, then per record
#   intrinsics 6 x f64, pose 12 x f64 (rotation row-major, translation),
#   dims 2 x u32 (width, height), depth f32[h*w], rgb u8[h*w*3]

_DS_MAGIC = b"CCD1"
_DS_VERSION = 1


def quantize_view(view: ViewRecord) -> ViewRecord:
    """The view exactly as it survives a dataset round trip."""
    rgb = np.round(np.clip(view.rgb, 0.0, 1.0) * 255.0).astype(np.uint8).astype(np.float64) / 255.0
    depth = view.depth.astype(np.float32).astype(np.float64)
    return ViewRecord(rgb, depth, view.intrinsics, view.cam_pose, view.instance)


def encode_records(records: list[ViewRecord]) -> bytes:
    out = [_DS_MAGIC, struct.pack("<HI", _DS_VERSION, len(records))]
    for r in records:
        k = r.intrinsics
        out.append(struct.pack("<6d", k.fx, k.fy, k.cx, k.cy, float(k.width), float(k.height)))
        out.append(struct.pack("<12d", *r.cam_pose.rotation.reshape(-1), *r.cam_pose.translation))
        out.append(struct.pack("<2I", k.width, k.height))
        out.append(np.ascontiguousarray(r.depth, dtype="<f4").tobytes())
        out.append(np.round(np.clip(r.rgb, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes())
    return b"".join(out)


def decode_records(blob: bytes) -> list[ViewRecord]:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated dataset file")
        b = blob[pos : pos + n]
        pos += n
        return b

    pos = 0
    if take(4) != _DS_MAGIC:
        raise FormatError("bad dataset magic")
    version, count = struct.unpack("<HI", take(6))
    if version != _DS_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    records = []
    for _ in range(count):
        fx, fy, cx, cy, fw, fh = struct.unpack("<6d", take(48))
        pose = struct.unpack("<12d", take(96))
        w, h = struct.unpack("<2I", take(8))
        if (w, h) != (int(fw), int(fh)):
            raise FormatError("record dims disagree with intrinsics")
        depth = np.frombuffer(take(4 * w * h), dtype="<f4").astype(np.float64).reshape(h, w)
        rgb = np.frombuffer(take(3 * w * h), dtype=np.uint8).astype(np.float64).reshape(h, w, 3) / 255.0
        k = CameraIntrinsics(fx, fy, cx, cy, w, h)
        cam = RigidTransform(np.array(pose[:9]).reshape(3, 3), np.array(pose[9:]))
        records.append(ViewRecord(rgb, depth, k, cam))
    if pos != len(blob):
        raise FormatError("trailing bytes after last record")
    return records


def write_dataset(path, records: list[ViewRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_records(records))


def read_dataset(path) -> list[ViewRecord]:
    with open(path, "rb") as fh:
        return decode_records(fh.read())


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
