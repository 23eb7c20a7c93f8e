"""The latent voxel map: coordinates, RGB-D lifting, trilinear sampling, warping.

Memory coordinates are continuous voxel indices with voxel ``(i, j, k)`` centered
at integer coordinate ``(i, j, k)``; the corresponding world point is
``world_min + (ijk + 0.5) * voxel_size``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, spmm
from .geometry import EPS_DEPTH, CameraIntrinsics, RigidTransform, unproject_depth_map

SNAP_TOL = 1e-9
HULL_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    world_min: tuple[float, float, float]
    world_max: tuple[float, float, float]
    resolution: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.world_min)
        hi = tuple(float(v) for v in self.world_max)
        res = tuple(int(v) for v in self.resolution)
        if len(lo) != 3 or len(hi) != 3 or len(res) != 3:
            raise ValueError("grid spec needs 3 components per field")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("world_max must exceed world_min on every axis")
        if any(r < 2 for r in res):
            raise ValueError("resolution must be at least 2 per axis")
        object.__setattr__(self, "world_min", lo)
        object.__setattr__(self, "world_max", hi)
        object.__setattr__(self, "resolution", res)

    @classmethod
    def centered(cls, center, extent, resolution) -> "GridSpec":
        c = np.asarray(center, dtype=np.float64)
        e = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,))
        r = resolution if np.ndim(resolution) else (resolution,) * 3
        return cls(tuple(c - e / 2), tuple(c + e / 2), tuple(r))

    @property
    def voxel_size(self) -> np.ndarray:
        return (np.array(self.world_max) - np.array(self.world_min)) / np.array(self.resolution)

    @property
    def num_voxels(self) -> int:
        w, h, d = self.resolution
        return w * h * d

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.world_min) + np.array(self.world_max)) / 2

    def scaled(self, factor: int) -> "GridSpec":
        """Same cuboid at ``factor`` times the resolution."""
        return GridSpec(self.world_min, self.world_max, tuple(int(r * factor) for r in self.resolution))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= np.array(self.world_min)) & (p <= np.array(self.world_max)), axis=-1)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, (W*H*D, 3) in row-major order."""
        w, h, d = self.resolution
        idx = np.stack(np.meshgrid(np.arange(w), np.arange(h), np.arange(d), indexing="ij"), axis=-1)
        return memory_to_world(idx.reshape(-1, 3).astype(np.float64), self)

    def normalized(self, points: np.ndarray) -> np.ndarray:
        """Map the cuboid onto [-1, 1]^3."""
        lo = np.array(self.world_min)
        hi = np.array(self.world_max)
        return 2.0 * (np.asarray(points, dtype=np.float64) - lo) / (hi - lo) - 1.0

    def to_array(self) -> np.ndarray:
        return np.array(list(self.world_min) + list(self.world_max) + list(self.resolution), dtype=np.float64)


def world_to_memory(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Continuous memory coordinates plus an inside-the-cuboid flag."""
    p = np.asarray(points, dtype=np.float64)
    mem = (p - np.array(spec.world_min)) / spec.voxel_size - 0.5
    return mem, spec.contains(p).reshape(p.shape[:-1])


def memory_to_world(coords: np.ndarray, spec: GridSpec) -> np.ndarray:
    return np.array(spec.world_min) + (np.asarray(coords, dtype=np.float64) + 0.5) * spec.voxel_size


@dataclass
class VoxelFeatureGrid:
    spec: GridSpec
    values: Tensor  # (W, H, D, C)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def flat(self) -> Tensor:
        from .autodiff import reshape

        return reshape(self.values, (self.spec.num_voxels, self.channels))


@dataclass
class OccupancyGrid:
    spec: GridSpec
    values: np.ndarray  # (W, H, D, 1) of {0, 1}
    dropped: int = 0  # points that fell outside the cuboid


# ---------------------------------------------------------------------------
# lifting an RGB-D view


def bilinear_sample_image(image: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample an (H, W, C) image at continuous pixel coordinates.

    Points outside ``[0, W) x [0, H)`` are marked invalid and return zeros;
    the half-pixel border interpolates against the clamped edge.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    u = uv[:, 0]
    v = uv[:, 1]
    valid = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    x = np.where(valid, u, 0.5) - 0.5
    y = np.where(valid, v, 0.5) - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = np.clip(x0, 0, w - 1)
    xb = np.clip(x0 + 1, 0, w - 1)
    ya = np.clip(y0, 0, h - 1)
    yb = np.clip(y0 + 1, 0, h - 1)
    out = (
        img[ya, xa] * ((1 - fx) * (1 - fy))[:, None]
        + img[ya, xb] * (fx * (1 - fy))[:, None]
        + img[yb, xa] * ((1 - fx) * fy)[:, None]
        + img[yb, xb] * (fx * fy)[:, None]
    )
    out[~valid] = 0.0
    return out, valid


def unproject_rgb(
    image: np.ndarray,
    depth_map: np.ndarray | None,
    k: CameraIntrinsics,
    cam_pose: RigidTransform,
    spec: GridSpec,
) -> np.ndarray:
    """Fill every voxel with the bilinearly sampled color of the pixel it projects to.

    ``cam_pose`` maps camera coordinates into the grid's frame. Voxels behind the
    camera or projecting outside the image stay zero. Returns (W, H, D, 3).
    """
    img = np.asarray(image, dtype=np.float64)
    if depth_map is not None and np.shape(depth_map) != img.shape[:2]:
        raise ValueError("image and depth map are not registered")
    centers = spec.voxel_centers()
    cam = cam_pose.inverse().apply(centers)
    z = cam[:, 2]
    front = z > EPS_DEPTH
    safe = np.where(front, z, 1.0)
    uv = np.stack([k.fx * cam[:, 0] / safe + k.cx, k.fy * cam[:, 1] / safe + k.cy], axis=-1)
    uv[~front] = np.nan
    rgb, _ = bilinear_sample_image(img, uv)
    return rgb.reshape(*spec.resolution, img.shape[2])


def voxelize_occupancy(points: np.ndarray, spec: GridSpec) -> OccupancyGrid:
    """1 where at least one point falls inside the voxel's cuboid."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    res = np.array(spec.resolution)
    idx = np.floor((p - np.array(spec.world_min)) / spec.voxel_size).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < res), axis=-1)
    grid = np.zeros(tuple(spec.resolution) + (1,))
    good = idx[ok]
    grid[good[:, 0], good[:, 1], good[:, 2], 0] = 1.0
    return OccupancyGrid(spec, grid, dropped=int((~ok).sum()))


def lift_view(rgb: np.ndarray, depth: np.ndarray, k: CameraIntrinsics, cam_pose: RigidTransform, spec: GridSpec) -> np.ndarray:
    """Concatenated [unprojected RGB, occupancy] input volume, (W, H, D, 4)."""
    u = unproject_rgb(rgb, depth, k, cam_pose, spec)
    pts, _ = unproject_depth_map(depth, k)
    occ = voxelize_occupancy(cam_pose.apply(pts), spec)
    return np.concatenate([u, occ.values], axis=-1)


# ---------------------------------------------------------------------------
# trilinear sampling


def interpolation_matrix(mem: np.ndarray, resolution) -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse (N, W*H*D) matrix of 8-corner trilinear weights over voxel centers.

    Queries outside the cuboid (``[-0.5, res-0.5]`` per axis) get an all-zero row
    and ``inside=False``; within the outer half-voxel shell the edge value is held.
    """
    mem = np.asarray(mem, dtype=np.float64).reshape(-1, 3)
    res = np.array(resolution, dtype=np.int64)
    hi = (res - 1).astype(np.float64)
    inside = np.all((mem >= -0.5 - HULL_TOL) & (mem <= hi + 0.5 + HULL_TOL), axis=-1)
    m = np.clip(mem, 0.0, hi)
    # coordinates a few ulps off a voxel center (e.g. after a 90 degree turn) are taken as on it
    near = np.rint(m)
    m = np.where(np.abs(m - near) < SNAP_TOL, near, m)
    base = np.minimum(np.floor(m), hi - 1).astype(np.int64)
    frac = m - base
    n = mem.shape[0]
    rows = np.repeat(np.arange(n), 8)
    cols = np.empty((n, 8), dtype=np.int64)
    wts = np.empty((n, 8))
    c = 0
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                ix = base[:, 0] + dx
                iy = base[:, 1] + dy
                iz = base[:, 2] + dz
                cols[:, c] = (ix * res[1] + iy) * res[2] + iz
                wts[:, c] = wx * wy * wz
                c += 1
    wts[~inside] = 0.0
    a = sp.csr_matrix((wts.reshape(-1), (rows, cols.reshape(-1))), shape=(n, int(np.prod(res))))
    return a, inside


def trilinear_sample(grid: VoxelFeatureGrid, mem: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Features at continuous memory coordinates, differentiable w.r.t. the grid."""
    a, inside = interpolation_matrix(mem, grid.spec.resolution)
    return spmm(a, grid.flat()), inside


def sample_world(grid: VoxelFeatureGrid, points: np.ndarray) -> tuple[Tensor, np.ndarray]:
    mem, _ = world_to_memory(np.asarray(points, dtype=np.float64).reshape(-1, 3), grid.spec)
    return trilinear_sample(grid, mem)


def warp_matrix(spec: GridSpec, v: RigidTransform) -> sp.csr_matrix:
    """Inverse-warp interpolation matrix: output voxel x samples the input at v^-1(x)."""
    src = v.inverse().apply(spec.voxel_centers())
    mem, _ = world_to_memory(src, spec)
    a, _ = interpolation_matrix(mem, spec.resolution)
    return a


def warp_grid(grid: VoxelFeatureGrid, v: RigidTransform) -> VoxelFeatureGrid:
    """Resample ``grid`` so content at world point p moves to v(p)."""
    from .autodiff import reshape

    a = warp_matrix(grid.spec, v)
    out = spmm(a, grid.flat())
    return VoxelFeatureGrid(grid.spec, reshape(out, grid.values.shape))


# ---------------------------------------------------------------------------
# debug dump: "CCG1", spec (6 x f64), dims (4 x u64), values (f64, row-major)

_GRID_MAGIC = b"CCG1"


def dump_grid(path, grid: VoxelFeatureGrid) -> None:
    vals = np.ascontiguousarray(grid.values.data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<6d", *grid.spec.world_min, *grid.spec.world_max))
        fh.write(struct.pack("<4Q", *vals.shape))
        fh.write(vals.tobytes())


def load_grid(path) -> VoxelFeatureGrid:
    with open(path, "rb") as fh:
        if fh.read(4) != _GRID_MAGIC:
            raise ValueError("not a grid dump")
        box = struct.unpack("<6d", fh.read(48))
        dims = struct.unpack("<4Q", fh.read(32))
        raw = fh.read()
    n = int(np.prod(dims))
    if len(raw) != 8 * n:
        raise ValueError("truncated grid dump")
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    spec = GridSpec(box[:3], box[3:], dims[:3])
    return VoxelFeatureGrid(spec, Tensor(values))
