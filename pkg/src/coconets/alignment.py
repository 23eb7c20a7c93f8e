"""Feature-matching rigid registration, object tracking and alignment metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .coconet import CoCoNet, FeatureCloud, amodal_feature_cloud, surface_points
from .featuregrid import GridSpec
from .geometry import (
    Box3D,
    RigidTransform,
    angle_difference,
    compose,
    euler_from_rotation,
)


class NoMatches(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    pass


class InsufficientMatches(ValueError):
    pass


class NoConsensus(RuntimeError):
    pass


DEGENERACY_TOL = 1e-9


@dataclass
class MatchSet:
    src: np.ndarray  # (n, 3)
    dst: np.ndarray  # (n, 3)
    scores: np.ndarray  # (n,)
    src_index: np.ndarray | None = None
    dst_index: np.ndarray | None = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 3)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 3)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.src) == len(self.dst) == len(self.scores)):
            raise ValueError("match arrays differ in length")

    def __len__(self) -> int:
        return len(self.src)


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 1000
    sample_size: int = 3
    inlier_radius: float = 0.09375  # half a voxel of the default 6 m / 32 grid
    similarity_floor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.inlier_radius > 0:
            raise ValueError("inlier radius must be positive")
        if self.sample_size < 3:
            raise ValueError("a rigid fit needs at least 3 samples")


# ---------------------------------------------------------------------------
# matching


def best_match(a: FeatureCloud, b: FeatureCloud, similarity_floor: float = 0.0, chunk: int = 2048) -> MatchSet:
    """For every point of ``a`` the point of ``b`` with the largest feature inner product."""
    if not len(a) or not len(b):
        raise NoMatches("empty feature cloud")
    best = np.empty(len(a), dtype=np.int64)
    score = np.empty(len(a))
    for i in range(0, len(a), chunk):
        sims = a.features[i : i + chunk] @ b.features.T
        j = np.argmax(sims, axis=1)
        best[i : i + chunk] = j
        score[i : i + chunk] = sims[np.arange(len(j)), j]
    keep = score > similarity_floor
    if not keep.any():
        raise NoMatches(f"no match scores above {similarity_floor}")
    src_idx = np.nonzero(keep)[0]
    return MatchSet(a.points[keep], b.points[best[keep]], score[keep], src_idx, best[keep])


def dense_correspondence(a: FeatureCloud, b: FeatureCloud, radius: float) -> MatchSet:
    """Argmax-cosine partner of each point of ``a`` among the points of ``b`` within ``radius``."""
    if not len(a) or not len(b):
        return MatchSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))
    tree = cKDTree(b.points)
    hoods = tree.query_ball_point(a.points, r=radius)
    src, dst, scores = [], [], []
    for i, hood in enumerate(hoods):
        if not hood:
            continue
        hood = np.sort(np.asarray(hood, dtype=np.int64))
        sims = b.features[hood] @ a.features[i]
        j = int(np.argmax(sims))
        src.append(i)
        dst.append(hood[j])
        scores.append(sims[j])
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    return MatchSet(a.points[src], b.points[dst], np.asarray(scores, dtype=np.float64), src, dst)


# ---------------------------------------------------------------------------
# rigid fitting


def procrustes(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None) -> RigidTransform:
    """Least-squares rigid transform with ``T(src) ~ dst`` (weighted Kabsch)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("point sets differ in length")
    if len(src) < 3:
        raise DegenerateConfiguration("need at least 3 point pairs")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    a = src - cs
    b = dst - cd
    if _is_degenerate(a, w):
        raise DegenerateConfiguration("source points are collinear or coincident")
    h = (a * w[:, None]).T @ b
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    d = 1.0 if d == 0 else d
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cd - r @ cs)


def _is_degenerate(centered: np.ndarray, w: np.ndarray) -> bool:
    s = np.linalg.svd(centered * np.sqrt(w)[:, None], compute_uv=False)
    scale = max(s[0], 1.0)
    return bool(s[1] <= DEGENERACY_TOL * scale)


def _batched_kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rigid fits for a batch of small point sets; (B, s, 3) -> rotations, translations, ok."""
    cs = src.mean(axis=1, keepdims=True)
    cd = dst.mean(axis=1, keepdims=True)
    a = src - cs
    b = dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    ok = sv[:, 1] > DEGENERACY_TOL * np.maximum(sv[:, 0], 1.0)
    h = np.einsum("bni,bnj->bij", a, b)
    u, _, vt = np.linalg.svd(h)
    v = np.transpose(vt, (0, 2, 1))
    ut = np.transpose(u, (0, 2, 1))
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    fix = np.tile(np.eye(3), (len(src), 1, 1))
    fix[:, 2, 2] = d
    r = v @ fix @ ut
    t = cd[:, 0] - np.einsum("bij,bj->bi", r, cs[:, 0])
    return r, t, ok


def ransac_align(matches: MatchSet, cfg: RansacConfig = RansacConfig(), chunk: int = 128) -> tuple[RigidTransform, np.ndarray]:
    """Consensus rigid transform mapping ``matches.src`` onto ``matches.dst``.

    Hypotheses are ranked by inlier count, then mean inlier residual, then
    iteration index. The winner is refit on its inliers.
    """
    n = len(matches)
    s = cfg.sample_size
    if n < s:
        raise InsufficientMatches(f"{n} matches, need at least {s}")
    rng = np.random.default_rng(cfg.seed)
    keys = rng.random((cfg.iterations, n))
    samples = np.argpartition(keys, s - 1, axis=1)[:, :s] if n > s else np.tile(np.arange(n), (cfg.iterations, 1))
    src, dst = matches.src, matches.dst
    best = (-1, math.inf, -1)
    best_mask = None
    for start in range(0, cfg.iterations, chunk):
        idx = samples[start : start + chunk]
        r, t, ok = _batched_kabsch(src[idx], dst[idx])
        moved = np.einsum("bij,nj->bni", r, src) + t[:, None, :]
        res = np.linalg.norm(moved - dst[None], axis=-1)
        inl = res < cfg.inlier_radius
        counts = inl.sum(axis=1)
        counts[~ok] = -1
        mean_res = np.where(counts > 0, (res * inl).sum(axis=1) / np.maximum(counts, 1), math.inf)
        for b in range(len(idx)):
            key = (int(counts[b]), float(mean_res[b]), start + b)
            if key[0] > best[0] or (key[0] == best[0] and key[1] < best[1]):
                best = key
                best_mask = inl[b].copy()
    if best[0] < s or best_mask is None:
        raise NoConsensus(f"best hypothesis has {max(best[0], 0)} inliers")
    try:
        fit = procrustes(src[best_mask], dst[best_mask])
    except DegenerateConfiguration as exc:
        raise NoConsensus("consensus set is degenerate") from exc
    return fit, best_mask


# ---------------------------------------------------------------------------
# metrics


def box_iou(a: Box3D, b: Box3D) -> float:
    """Volume IoU of the axis-aligned hulls of two boxes."""
    a = a.axis_aligned()
    b = b.axis_aligned()
    lo = np.maximum(a.center - a.half_extents, b.center - b.half_extents)
    hi = np.minimum(a.center + a.half_extents, b.center + b.half_extents)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    va = float(np.prod(2 * a.half_extents))
    vb = float(np.prod(2 * b.half_extents))
    union = va + vb - inter
    return inter / union if union > 0 else 0.0


def rotation_errors(estimated: RigidTransform, truth: RigidTransform) -> tuple[float, float, float]:
    """Yaw, pitch and roll of the residual rotation ``R_est @ R_true^T``, degrees, shortest arc."""
    rel = estimated.rotation @ truth.rotation.T
    e = euler_from_rotation(rel)
    return tuple(math.degrees(angle_difference(x, 0.0)) for x in (e.yaw, e.pitch, e.roll))  # type: ignore[return-value]


def rotation_accuracy(estimated: RigidTransform, truth: RigidTransform, tol_deg: float = 10.0) -> bool:
    return all(d <= tol_deg for d in rotation_errors(estimated, truth))


# ---------------------------------------------------------------------------
# feature clouds for tracking


class ModelFeaturizer:
    """Feature clouds from a trained model, expressed in a fixed reference frame.

    With ``amodal`` the cloud covers uniform queries over the whole cuboid plus the
    visible surface; otherwise only the visible surface points are queried.
    """

    def __init__(self, model: CoCoNet, spec: GridSpec, n_uniform: int = 4096, amodal: bool = True, seed: int = 0):
        self.model = model
        self.spec = spec
        self.n_uniform = n_uniform
        self.amodal = amodal
        self.seed = seed

    def cloud(self, view, to_ref: RigidTransform, index: int = 0) -> FeatureCloud:
        grid = self.model.encode_view(view, self.spec, to_ref)
        vis = surface_points(view, to_ref)
        vis = vis[self.spec.contains(vis)]
        if self.amodal:
            rng = np.random.default_rng([self.seed, index])
            uni = rng.uniform(self.spec.world_min, self.spec.world_max, size=(self.n_uniform, 3))
            pts = np.concatenate([uni, vis], axis=0)
        else:
            pts = vis
        return amodal_feature_cloud(self.model, grid, pts, "top_down" if self.amodal else "visible")


class OracleFeaturizer:
    """Ideal features for a tracking sequence: a point's code is a hash of its
    position on the target object at frame 0, so true correspondences match exactly.

    Distractor points scattered over the cuboid, away from the initial box,
    carry random codes.
    """

    def __init__(self, seq, spec: GridSpec, n_object: int = 256, n_distractors: int = 1024, dim: int = 64, seed: int = 0):
        self.seq = seq
        self.spec = spec
        rng = np.random.default_rng(seed)
        ref_inv = seq.reference_pose.inverse()
        box0 = seq.boxes[0].transformed(ref_inv)
        local = rng.uniform(-1.0, 1.0, size=(n_object, 3)) * box0.half_extents
        self.object_points = box0.center + local @ box0.orientation.T
        self.codes = _unit_rows(rng.normal(size=(n_object, dim)))
        far = rng.uniform(spec.world_min, spec.world_max, size=(4 * n_distractors, 3))
        far = far[~box0.contains(far, pad=float(np.min(spec.voxel_size)))]
        self.distractors = far[:n_distractors]
        self.distractor_codes = _unit_rows(rng.normal(size=(len(self.distractors), dim)))
        self._ref_inv = ref_inv

    def motion_in_ref(self, index: int) -> RigidTransform:
        m = self.seq.object_motion[index]
        return compose(self._ref_inv, compose(m, self.seq.reference_pose))

    def cloud(self, view, to_ref: RigidTransform, index: int = 0) -> FeatureCloud:
        obj = self.motion_in_ref(index).apply(self.object_points)
        pts = np.concatenate([obj, self.distractors], axis=0)
        feats = np.concatenate([self.codes, self.distractor_codes], axis=0)
        return FeatureCloud(pts, feats, "oracle")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass
class TrackResult:
    boxes: list[Box3D]  # world frame
    transforms: list[RigidTransform]  # frame-0 object -> frame t, reference frame
    lost: list[bool]
    ious: list[float] = field(default_factory=list)

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious)) if self.ious else float("nan")


def track_sequence(featurizer, seq, box0: Box3D, cfg: RansacConfig = RansacConfig(),
                   object_pad: float = 0.0) -> TrackResult:
    """Track the object inside ``box0`` (world frame) through ``seq``.

    Clouds live in the frame-0 camera frame (egomotion is known). Each frame's
    whole-scene cloud is matched against the frame-0 object cloud and the
    consensus transform moves ``box0``. Frames without consensus keep the previous box.
    """
    ref = seq.reference_pose
    ref_inv = ref.inverse()
    box0_ref = box0.transformed(ref_inv)
    clouds = []
    for t, view in enumerate(seq.frames):
        to_ref = compose(ref_inv, view.cam_pose)
        clouds.append(featurizer.cloud(view, to_ref, t))
    obj = clouds[0].subset(box0_ref.contains(clouds[0].points, pad=object_pad))
    if len(obj) < cfg.sample_size:
        raise InsufficientMatches("too few feature points inside the initial box")
    boxes, transforms, lost = [box0], [RigidTransform.identity()], [False]
    prev = RigidTransform.identity()
    for t in range(1, len(seq.frames)):
        try:
            matches = best_match(obj, clouds[t], cfg.similarity_floor)
            fit, _ = ransac_align(matches, RansacConfig(cfg.iterations, cfg.sample_size, cfg.inlier_radius,
                                                        cfg.similarity_floor, cfg.seed + t))
            lost.append(False)
        except (NoMatches, InsufficientMatches, NoConsensus):
            fit = prev
            lost.append(True)
        prev = fit
        transforms.append(fit)
        boxes.append(box0_ref.transformed(fit).transformed(ref))
    ious = [box_iou(b, g) for b, g in zip(boxes, seq.boxes)]
    return TrackResult(boxes, transforms, lost, ious)


def align_objects(model: CoCoNet, view_a, view_b, spec: GridSpec, cfg: RansacConfig = RansacConfig(),
                  n_uniform: int = 4096, seed: int = 0) -> RigidTransform:
    """Rigid transform taking view A's camera-frame content onto view B's."""
    feat = ModelFeaturizer(model, spec, n_uniform, amodal=True, seed=seed)
    ident = RigidTransform.identity()
    a = feat.cloud(view_a, ident, 0)
    b = feat.cloud(view_b, ident, 1)
    fit, _ = ransac_align(best_match(a, b, cfg.similarity_floor), cfg)
    return fit


# ---------------------------------------------------------------------------
# csv output


def write_tracking_csv(path, result: TrackResult, truth: list[Box3D]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cx", "cy", "cz", "hx", "hy", "hz", "lost", "iou"])
        for t, (box, gt) in enumerate(zip(result.boxes, truth)):
            aabb = box.axis_aligned()
            w.writerow([t, *(f"{x:.9g}" for x in aabb.center), *(f"{x:.9g}" for x in aabb.half_extents),
                        int(result.lost[t]), f"{box_iou(box, gt):.9g}"])


def write_alignment_csv(path, rows: list[tuple]) -> None:
    """Rows of ``(pair_id, dyaw, dpitch, droll, correct)``, degrees."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "dyaw", "dpitch", "droll", "correct"])
        for pid, dy, dp, dr, ok in rows:
            w.writerow([pid, f"{dy:.6f}", f"{dp:.6f}", f"{dr:.6f}", int(bool(ok))])

