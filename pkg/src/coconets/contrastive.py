"""View-contrastive training: correspondences, InfoNCE with a negative queue,
occupancy / RGB losses and the optimization loop."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .coconet import CoCoNet, ModelConfig, surface_points
from .featuregrid import GridSpec, VoxelFeatureGrid, warp_grid
from .geometry import RigidTransform, compose

log = logging.getLogger(__name__)


class EmptyTargetCloud(ValueError):
    pass


@dataclass
class ViewPair:
    input: object  # ViewRecord
    target: object  # ViewRecord
    relative: RigidTransform = None  # type: ignore[assignment]

    def __post_init__(self):
        # input camera -> target camera
        rel = compose(self.target.cam_pose.inverse(), self.input.cam_pose)
        if self.relative is None:
            self.relative = rel
        elif not (np.allclose(self.relative.rotation, rel.rotation, atol=1e-9)
                  and np.allclose(self.relative.translation, rel.translation, atol=1e-9)):
            raise ValueError("relative pose disagrees with the stored camera poses")


class NegativeQueue:
    """FIFO ring buffer of detached unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim))
        self.count = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.count

    @property
    def full(self) -> bool:
        return self.count == self.capacity

    def push(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float64).reshape(-1, self.dim)
        if len(keys) >= self.capacity:
            keys = keys[-self.capacity :]
        n = len(keys)
        end = self.cursor + n
        if end <= self.capacity:
            self.buffer[self.cursor : end] = keys
        else:
            split = self.capacity - self.cursor
            self.buffer[self.cursor :] = keys[:split]
            self.buffer[: n - split] = keys[split:]
        self.cursor = end % self.capacity
        self.count = min(self.capacity, self.count + n)

    def negatives(self) -> np.ndarray:
        """Stored keys, oldest first."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.concatenate([self.buffer[self.cursor :], self.buffer[: self.cursor]], axis=0)

    def state(self) -> dict[str, np.ndarray]:
        return {
            "queue.buffer": self.buffer.copy(),
            "queue.meta": np.array([self.count, self.cursor, self.capacity, self.dim], dtype=np.float64),
        }

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "NegativeQueue":
        count, cursor, capacity, dim = (int(x) for x in state["queue.meta"])
        q = cls(capacity, dim)
        q.buffer = state["queue.buffer"].copy()
        q.count, q.cursor = count, cursor
        return q


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    num_negatives: int = 1024
    n_pos: int = 512
    n_occ: int = 512
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    steps: int = 2000
    seed: int = 0
    lambda_nce: float = 1.0
    lambda_occ: float = 1.0
    lambda_rgb: float = 1.0
    mode: str = "joint"  # "joint" | "separate"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.num_negatives < 1 or self.n_pos < 1:
            raise ValueError("num_negatives and n_pos must be at least 1")
        if self.mode not in ("joint", "separate"):
            raise ValueError(f"unknown training mode {self.mode!r}")


# ---------------------------------------------------------------------------
# sampling


@dataclass
class Correspondences:
    q: Tensor
    k_pos: Tensor
    points: np.ndarray
    refilled: int = 0  # samples drawn with replacement because the view had too few points


def grid_points(view, spec: GridSpec) -> np.ndarray:
    """Visible surface points of a view (camera frame) that lie inside the cuboid."""
    pts = surface_points(view)
    return pts[spec.contains(pts)]


def choose_points(points: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """``n`` rows without replacement, topped up with replacement if too few exist."""
    m = len(points)
    if n <= m:
        return points[np.sort(rng.choice(m, size=n, replace=False))], 0
    extra = rng.integers(m, size=n - m)
    return np.concatenate([points, points[extra]], axis=0), n - m


def sample_correspondences(pair: ViewPair, model: CoCoNet, n_pos: int, seed: int, spec: GridSpec,
                           m_top: VoxelFeatureGrid | None = None,
                           m_bottom: VoxelFeatureGrid | None = None) -> Correspondences:
    """Top-down and bottom-up features at the same target-frame surface points.

    ``m_top`` is the input view's map warped into the target camera frame,
    ``m_bottom`` the target view's own map; both are computed if omitted.
    """
    pts_all = grid_points(pair.target, spec)
    if not len(pts_all):
        raise EmptyTargetCloud("target view has no surface points inside the grid")
    rng = np.random.default_rng(seed)
    pts, refilled = choose_points(pts_all, n_pos, rng)
    if refilled:
        log.debug("correspondence sampling refilled %d points with replacement", refilled)
    if m_top is None:
        m_top = warp_grid(model.encode_view(pair.input, spec), pair.relative)
    if m_bottom is None:
        m_bottom = model.encode_view(pair.target, spec)
    return Correspondences(model.query_feature(m_top, pts), model.query_feature(m_bottom, pts), pts, refilled)


def sample_occupancy_labels(view, n: int, seed: int, spec: GridSpec, voxel_size: float | None = None):
    """Occupied surface points and free-space points along camera rays.

    Free points lie on pixel rays at Z-depth at least one voxel in front of the
    first hit (rays that hit nothing are free up to the far face of the cuboid).
    Returns ``(positives, negatives)`` in the camera frame.
    """
    if n <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    vox = float(np.min(spec.voxel_size)) if voxel_size is None else float(voxel_size)
    pos_all = grid_points(view, spec)
    pos = choose_points(pos_all, n, rng)[0] if len(pos_all) else np.zeros((0, 3))

    k = view.intrinsics
    z_near = max(spec.world_min[2], 1e-3)
    z_far_grid = spec.world_max[2]
    depth = view.depth.reshape(-1)
    limit = np.where(depth > 0, depth - vox, z_far_grid)
    limit = np.minimum(limit, z_far_grid)
    ok = np.nonzero(limit > z_near)[0]
    if not len(ok):
        return pos, np.zeros((0, 3))
    rays = ok[rng.integers(len(ok), size=n)]
    z = rng.uniform(z_near, limit[rays])
    rows, cols = np.divmod(rays, k.width)
    u = cols + 0.5
    v = rows + 0.5
    neg = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=-1)
    return pos, neg


# ---------------------------------------------------------------------------
# losses


def info_nce_loss(q: Tensor, k_pos: Tensor, negatives: np.ndarray, tau: float) -> Tensor:
    """Mean over anchors of -log softmax of the positive among 1 + K candidates."""
    negs = np.asarray(negatives, dtype=np.float64)
    pos = ad.scale(ad.sum_last(ad.mul(q, k_pos)), 1.0 / tau)
    if len(negs):
        neg = ad.scale(ad.matmul(q, Tensor(negs.T)), 1.0 / tau)
        logits = ad.concat([pos, neg], axis=-1)
    else:
        logits = pos
    return ad.mean_all(ad.sub(ad.logsumexp_last(logits), pos))


def occupancy_bce_loss(model: CoCoNet, m: VoxelFeatureGrid, positive_points: np.ndarray,
                       negative_points: np.ndarray) -> Tensor:
    pts = np.concatenate([np.asarray(positive_points).reshape(-1, 3), np.asarray(negative_points).reshape(-1, 3)])
    labels = np.concatenate([np.ones(len(positive_points)), np.zeros(len(negative_points))])
    return ad.bce_with_logits(model.query_occupancy_logits(m, pts), labels)


def rgb_regression_loss(model: CoCoNet, m: VoxelFeatureGrid, points: np.ndarray, colors: np.ndarray) -> Tensor:
    return ad.mse(model.query_rgb(m, points), colors)


def surface_colors(view, points: np.ndarray) -> np.ndarray:
    """Image colors at camera-frame points that came from the view's own depth map."""
    k = view.intrinsics
    u = k.fx * points[:, 0] / points[:, 2] + k.cx
    v = k.fy * points[:, 1] / points[:, 2] + k.cy
    cols = np.clip(np.floor(u).astype(np.int64), 0, k.width - 1)
    rows = np.clip(np.floor(v).astype(np.int64), 0, k.height - 1)
    return view.rgb[rows, cols]


# ---------------------------------------------------------------------------
# one optimization step


@dataclass
class StepLosses:
    total: float
    nce: float
    occ: float
    rgb: float


def pair_losses(model: CoCoNet, pair: ViewPair, negatives: np.ndarray, cfg: TrainConfig, spec: GridSpec,
                seed: int) -> tuple[Tensor, dict[str, float], np.ndarray]:
    """Weighted loss of one view pair (recorded on the active tape) and its detached keys."""
    m_top = warp_grid(model.encode_view(pair.input, spec), pair.relative)
    parts: dict[str, Tensor] = {}
    keys = np.zeros((0, model.config.feature_dim))
    if cfg.lambda_nce:
        m_bottom = model.encode_view(pair.target, spec)
        corr = sample_correspondences(pair, model, cfg.n_pos, seed, spec, m_top, m_bottom)
        parts["nce"] = ad.scale(info_nce_loss(corr.q, corr.k_pos, negatives, cfg.tau), cfg.lambda_nce)
        keys = corr.k_pos.data.copy()
    if cfg.lambda_occ:
        pos, neg = sample_occupancy_labels(pair.target, cfg.n_occ, seed + 1, spec)
        parts["occ"] = ad.scale(occupancy_bce_loss(model, m_top, pos, neg), cfg.lambda_occ)
    if cfg.lambda_rgb:
        pts = choose_points(grid_points(pair.target, spec), cfg.n_occ, np.random.default_rng(seed + 2))[0]
        parts["rgb"] = ad.scale(rgb_regression_loss(model, m_top, pts, surface_colors(pair.target, pts)), cfg.lambda_rgb)
    total = None
    for t in parts.values():
        total = t if total is None else ad.add(total, t)
    raw = {
        "nce": float(parts["nce"].data) / cfg.lambda_nce if "nce" in parts else 0.0,
        "occ": float(parts["occ"].data) / cfg.lambda_occ if "occ" in parts else 0.0,
        "rgb": float(parts["rgb"].data) / cfg.lambda_rgb if "rgb" in parts else 0.0,
    }
    return total, raw, keys


def train_step(model: CoCoNet, pairs: list[ViewPair], queue: NegativeQueue, cfg: TrainConfig, spec: GridSpec,
               seed: int) -> StepLosses:
    """Forward + backward over a batch of pairs, one Adam update, then enqueue keys.

    Negatives are read from the queue before any of this step's keys are pushed.
    """
    negatives = queue.negatives()
    model.params.zero_grad()
    sums = {"nce": 0.0, "occ": 0.0, "rgb": 0.0}
    all_keys = []
    total_value = 0.0
    with Tape() as tape:
        total = None
        for b, pair in enumerate(pairs):
            loss, raw, keys = pair_losses(model, pair, negatives, cfg, spec, seed * 1000 + 10 * b)
            total = loss if total is None else ad.add(total, loss)
            for name in sums:
                sums[name] += raw[name] / len(pairs)
            all_keys.append(keys)
        total = ad.scale(total, 1.0 / len(pairs))
        total_value = float(total.data)
    ad.backward(tape, total)
    ad.adam_step(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for keys in all_keys:
        if len(keys):
            queue.push(keys)
    return StepLosses(total_value, sums["nce"], sums["occ"], sums["rgb"])


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingData:
    """Views grouped by scene; pairs are drawn within a scene."""

    scenes: list[list]  # list of lists of ViewRecord
    spec: GridSpec

    def pair(self, rng: np.random.Generator) -> ViewPair:
        views = self.scenes[int(rng.integers(len(self.scenes)))]
        i, j = rng.choice(len(views), size=2, replace=False)
        return ViewPair(views[int(i)], views[int(j)])


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


@dataclass
class Trainer:
    data: TrainingData
    cfg: TrainConfig
    model: CoCoNet
    queue: NegativeQueue = None  # type: ignore[assignment]
    occ_model: CoCoNet | None = None  # separate-mode occupancy/RGB model
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.queue is None:
            self.queue = NegativeQueue(self.cfg.num_negatives, self.model.config.feature_dim)
        if self.cfg.mode == "separate" and self.occ_model is None:
            self.occ_model = CoCoNet(replace(self.model.config, seed=self.model.config.seed + 1))

    @property
    def step(self) -> int:
        return self.model.params.step_count

    def prime_queue(self) -> None:
        """Fill the queue with keys from the current (untrained) model."""
        rng = step_rng(self.cfg.seed, -1 & 0xFFFFFFFF)
        spec = self.data.spec
        i = 0
        with ad.no_grad():
            while not self.queue.full:
                pair = self.data.pair(rng)
                pts = grid_points(pair.target, spec)
                if not len(pts):
                    continue
                pts, _ = choose_points(pts, self.cfg.n_pos, np.random.default_rng([self.cfg.seed, i]))
                m = self.model.encode_view(pair.target, spec)
                self.queue.push(self.model.query_feature(m, pts).data)
                i += 1

    def batch(self, step: int) -> list[ViewPair]:
        rng = step_rng(self.cfg.seed, step)
        return [self.data.pair(rng) for _ in range(self.cfg.batch_size)]

    def run_step(self) -> dict:
        cfg = self.cfg
        step = self.step
        if step == 0 and len(self.queue) == 0 and cfg.lambda_nce:
            self.prime_queue()
        pairs = self.batch(step)
        seed = cfg.seed * 100_003 + step
        t0 = time.perf_counter()
        if cfg.mode == "joint":
            res = train_step(self.model, pairs, self.queue, cfg, self.data.spec, seed)
            row = {"step": step, "l_nce": res.nce, "l_occ": res.occ, "l_rgb": res.rgb}
        else:
            c_cfg = replace(cfg, lambda_occ=0.0, lambda_rgb=0.0)
            o_cfg = replace(cfg, lambda_nce=0.0)
            res = train_step(self.model, pairs, self.queue, c_cfg, self.data.spec, seed)
            res_o = train_step(self.occ_model, pairs, self.queue, o_cfg, self.data.spec, seed)
            row = {"step": step, "l_nce": res.nce, "l_occ": res_o.occ, "l_rgb": res_o.rgb}
        row["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        self.history.append(row)
        return row

    def train(self, steps: int | None = None, log_path=None, checkpoint_path=None, callback=None) -> list[dict]:
        """Run until ``steps`` total optimizer steps have been taken."""
        target = self.cfg.steps if steps is None else steps
        rows = []
        writer = None
        fh = None
        if log_path is not None:
            new = not os.path.exists(log_path)
            fh = open(log_path, "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=["step", "l_nce", "l_occ", "l_rgb", "wall_ms"])
            if new:
                writer.writeheader()
        try:
            while self.step < target:
                row = self.run_step()
                rows.append(row)
                if writer is not None:
                    writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
                    fh.flush()
                if callback is not None:
                    callback(row)
                every = self.cfg.checkpoint_every
                if checkpoint_path is not None and every and self.step % every == 0:
                    self.save(checkpoint_path)
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return rows

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.model.params, self.queue.state())
        if self.occ_model is not None:
            ad.save_checkpoint(occ_checkpoint_path(path), self.occ_model.params)

    def load(self, path) -> None:
        _, extra = ad.load_checkpoint(path, self.model.params)
        if "queue.meta" in extra:
            self.queue = NegativeQueue.from_state(extra)
        if self.occ_model is not None:
            ad.load_checkpoint(occ_checkpoint_path(path), self.occ_model.params)


def occ_checkpoint_path(path) -> str:
    root, ext = os.path.splitext(str(path))
    return f"{root}_occrgb{ext or '.ccn'}"


def config_dict(cfg) -> dict:
    return asdict(cfg)
