"""Dataset generation and the evaluation protocols behind the command line."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .alignment import (
    InsufficientMatches,
    ModelFeaturizer,
    NoConsensus,
    NoMatches,
    OracleFeaturizer,
    RansacConfig,
    TrackResult,
    align_objects,
    box_iou,
    rotation_accuracy,
    rotation_errors,
    track_sequence,
)
from .coconet import CoCoNet, query_in_chunks
from .config import RunConfig
from .contrastive import TrainingData, ViewPair, grid_points
from .featuregrid import GridSpec, warp_grid
from .geometry import Box3D, RigidTransform, compose, look_at
from .synthscene import (
    MotionSpec,
    Scene,
    TrackingSequence,
    ViewRecord,
    file_checksum,
    make_tracking_sequence,
    occlusion_ratio,
    read_dataset,
    render_view,
    sample_camera_poses,
    sample_scene,
    write_dataset,
)

log = logging.getLogger(__name__)

TRAIN, TRACK, ALIGN, OCC, MATCH = "train", "track", "align", "occ", "match"
SET_IDS = {TRAIN: 1, TRACK: 2, ALIGN: 3, OCC: 4, MATCH: 5}


def derive_seed(seed: int, *path: int) -> int:
    """Independent 32-bit seed for item ``path`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# serialization helpers


def transform_to_list(t: RigidTransform) -> list:
    return t.matrix().tolist()


def transform_from_list(m) -> RigidTransform:
    return RigidTransform.from_matrix(np.asarray(m, dtype=np.float64))


def box_to_list(b: Box3D) -> list:
    return b.as_array().tolist()


def box_from_list(a) -> Box3D:
    a = np.asarray(a, dtype=np.float64)
    return Box3D(a[:3], a[3:6], a[6:].reshape(3, 3))


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# generation


def _scene(cfg: RunConfig, seed: int) -> Scene:
    return sample_scene(cfg.data.objects, seed, placement_radius=cfg.data.placement_radius)


def _random_poses(cfg: RunConfig, n: int, seed: int) -> list[RigidTransform]:
    cam = cfg.camera
    return sample_camera_poses("random", n, seed=seed, distance=cam.distance,
                               elevation_range=(cam.elevation_min, cam.elevation_max))


def generate_training_views(cfg: RunConfig) -> tuple[list[list[ViewRecord]], list[Scene]]:
    k = cfg.camera.intrinsics()
    groups, scenes = [], []
    for i in range(cfg.data.train_scenes):
        s = derive_seed(cfg.seed, SET_IDS[TRAIN], i)
        scene = _scene(cfg, s)
        groups.append([render_view(scene, p, k) for p in _random_poses(cfg, cfg.data.views_per_scene, s)])
        scenes.append(scene)
    return groups, scenes


def _occluded_pose(cfg: RunConfig, scene: Scene, target_id: int, rng: np.random.Generator):
    """A camera behind another primitive, looking at the target, or None."""
    k = cfg.camera.intrinsics()
    target = scene.get(target_id)
    others = [p for p in scene.primitives if p.instance_id != target_id]
    if not others:
        return None, 0.0
    for _ in range(40):
        other = others[int(rng.integers(len(others)))]
        d = other.center - target.center
        az = math.atan2(d[1], d[0]) + math.radians(rng.uniform(-20.0, 20.0))
        el = math.radians(rng.uniform(5.0, 25.0))
        eye = target.center + cfg.camera.distance * np.array([math.cos(el) * math.cos(az),
                                                              math.cos(el) * math.sin(az), math.sin(el)])
        pose = look_at(eye, target.center)
        occ = occlusion_ratio(scene, target_id, pose, k)
        if cfg.data.min_occlusion <= occ <= 0.9:
            return pose, occ
    return None, 0.0


def generate_tracking_sequences(cfg: RunConfig) -> list[dict]:
    """Sequences with their metadata; every other one (per ``occluded_share``) is shot past an occluder."""
    k = cfg.camera.intrinsics()
    d = cfg.data
    out = []
    n_occ = int(round(d.track_sequences * d.occluded_share))
    for i in range(d.track_sequences):
        want_occ = i < n_occ
        attempt = 0
        while True:
            s = derive_seed(cfg.seed, SET_IDS[TRACK], i, attempt)
            rng = np.random.default_rng(s)
            scene = _scene(cfg, s)
            if want_occ:
                pose, occ = _occluded_pose(cfg, scene, 0, rng)
                if pose is None:
                    attempt += 1
                    continue
            else:
                pose = _random_poses(cfg, 1, s)[0]
                occ = occlusion_ratio(scene, 0, pose, k)
            break
        heading = rng.uniform(0, 2 * math.pi)
        climb = rng.uniform(-0.2, 0.2)
        direction = np.array([math.cos(heading), math.sin(heading), climb])
        direction /= np.linalg.norm(direction)
        speed = rng.uniform(*d.speed_range)
        motion = MotionSpec(velocity=tuple(direction * speed), yaw_rate=float(rng.uniform(-1, 1) * d.yaw_rate_max),
                            pose_noise=d.pose_noise)
        seq = make_tracking_sequence(scene, 0, motion, pose, k, n_frames=d.track_frames, seed=s)
        out.append({"sequence": seq, "scene": scene, "occlusion": occ, "motion": motion})
    return out


def generate_view_pairs(cfg: RunConfig, kind: str, n: int, max_yaw: float | None = None) -> list[dict]:
    """Two views of each of ``n`` fresh scenes. With ``max_yaw`` the second camera
    sits at an azimuth offset drawn uniformly from +-max_yaw degrees."""
    k = cfg.camera.intrinsics()
    cam = cfg.camera
    out = []
    for i in range(n):
        s = derive_seed(cfg.seed, SET_IDS[kind], i)
        rng = np.random.default_rng(s)
        scene = _scene(cfg, s)
        if max_yaw is None:
            pa, pb = _random_poses(cfg, 2, s)
        else:
            az = rng.uniform(0.0, 360.0)
            dyaw = rng.uniform(-max_yaw, max_yaw)
            els = rng.uniform(cam.elevation_min, cam.elevation_max, size=2)
            pa = _orbit_pose(cam.distance, az, els[0])
            pb = _orbit_pose(cam.distance, az + dyaw, els[1])
        va, vb = render_view(scene, pa, k), render_view(scene, pb, k)
        out.append({"views": (va, vb), "scene": scene})
    return out


def _orbit_pose(distance: float, az_deg: float, el_deg: float) -> RigidTransform:
    az, el = math.radians(az_deg), math.radians(el_deg)
    eye = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return look_at(eye, np.zeros(3))


def generate_occupancy_views(cfg: RunConfig) -> list[dict]:
    k = cfg.camera.intrinsics()
    out = []
    for i in range(cfg.data.occ_views):
        s = derive_seed(cfg.seed, SET_IDS[OCC], i)
        scene = _scene(cfg, s)
        out.append({"view": render_view(scene, _random_poses(cfg, 1, s)[0], k), "scene": scene})
    return out


def generate_all(cfg: RunConfig, out_dir) -> dict:
    """Write every dataset of a run into ``out_dir``; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    counts = {}

    groups, scenes = generate_training_views(cfg)
    write_dataset(os.path.join(out_dir, "train.ccd"), [v for g in groups for v in g])
    _write_json(os.path.join(out_dir, "train.json"), {
        "views_per_scene": [len(g) for g in groups],
        "scenes": [s.to_dict() for s in scenes],
    })
    counts[TRAIN] = sum(len(g) for g in groups)

    seqs = generate_tracking_sequences(cfg)
    write_dataset(os.path.join(out_dir, "track.ccd"), [f for item in seqs for f in item["sequence"].frames])
    _write_json(os.path.join(out_dir, "track.json"), {"sequences": [{
        "frames": len(item["sequence"]),
        "target_id": item["sequence"].target_id,
        "scene": item["scene"].to_dict(),
        "occlusion": item["occlusion"],
        "motion": [transform_to_list(m) for m in item["sequence"].object_motion],
        "boxes": [box_to_list(b) for b in item["sequence"].boxes],
    } for item in seqs]})
    counts[TRACK] = len(seqs)

    for kind, n, yaw in ((ALIGN, cfg.data.align_pairs, cfg.data.align_yaw_max), (MATCH, cfg.data.match_pairs, None)):
        pairs = generate_view_pairs(cfg, kind, n, yaw)
        write_dataset(os.path.join(out_dir, f"{kind}.ccd"), [v for p in pairs for v in p["views"]])
        _write_json(os.path.join(out_dir, f"{kind}.json"), {"scenes": [p["scene"].to_dict() for p in pairs]})
        counts[kind] = len(pairs)

    occ = generate_occupancy_views(cfg)
    write_dataset(os.path.join(out_dir, "occ.ccd"), [o["view"] for o in occ])
    _write_json(os.path.join(out_dir, "occ.json"), {"scenes": [o["scene"].to_dict() for o in occ]})
    counts[OCC] = len(occ)

    manifest = {
        "counts": counts,
        "checksums": {name: file_checksum(os.path.join(out_dir, name))
                      for name in sorted(os.listdir(out_dir)) if name.endswith((".ccd", ".json"))
                      and name != "manifest.json"},
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


# ---------------------------------------------------------------------------
# loading


def load_training_data(data_dir, spec: GridSpec) -> TrainingData:
    views = read_dataset(os.path.join(data_dir, "train.ccd"))
    meta = _read_json(os.path.join(data_dir, "train.json"))
    groups, i = [], 0
    for n in meta["views_per_scene"]:
        groups.append(views[i : i + n])
        i += n
    return TrainingData(groups, spec)


@dataclass
class TrackItem:
    sequence: TrackingSequence
    scene: Scene
    occlusion: float


def load_tracking(data_dir) -> list[TrackItem]:
    frames = read_dataset(os.path.join(data_dir, "track.ccd"))
    meta = _read_json(os.path.join(data_dir, "track.json"))
    out, i = [], 0
    for m in meta["sequences"]:
        n = m["frames"]
        scene = Scene.from_dict(m["scene"])
        motions = [transform_from_list(x) for x in m["motion"]]
        target = scene.get(m["target_id"])
        scenes = [scene.replace_primitive(target.moved(mt)) for mt in motions]
        seq = TrackingSequence(frames[i : i + n], m["target_id"], motions, [box_from_list(b) for b in m["boxes"]], scenes)
        out.append(TrackItem(seq, scene, float(m["occlusion"])))
        i += n
    return out


def load_pairs(data_dir, kind: str) -> list[tuple[ViewRecord, ViewRecord, Scene]]:
    views = read_dataset(os.path.join(data_dir, f"{kind}.ccd"))
    meta = _read_json(os.path.join(data_dir, f"{kind}.json"))
    return [(views[2 * j], views[2 * j + 1], Scene.from_dict(s)) for j, s in enumerate(meta["scenes"])]


def load_occupancy(data_dir) -> list[tuple[ViewRecord, Scene]]:
    views = read_dataset(os.path.join(data_dir, "occ.ccd"))
    meta = _read_json(os.path.join(data_dir, "occ.json"))
    return [(v, Scene.from_dict(s)) for v, s in zip(views, meta["scenes"])]


# ---------------------------------------------------------------------------
# evaluation protocols


def cross_view_accuracy(model: CoCoNet, pairs, spec: GridSpec, n_queries: int = 256, seed: int = 0,
                        radius: float | None = None) -> tuple[float, int]:
    """Top-1 retrieval of bottom-up features by top-down ones across two views.

    For each pair the first view's map is warped into the second camera's frame.
    Queries are top-down features at a random subset of the second view's
    visible points; candidates are bottom-up features at all of them. A query
    counts as correct when its best candidate lies within ``radius`` (default one
    voxel) of the query point.
    """
    radius = float(np.min(spec.voxel_size)) if radius is None else radius
    hits = total = 0
    for j, (va, vb, *_rest) in enumerate(pairs):
        pts = grid_points(vb, spec)
        if len(pts) == 0:
            continue
        pair = ViewPair(va, vb)
        top = warp_grid(model.encode_view(va, spec), pair.relative)
        bottom = model.encode_view(vb, spec)
        rng = np.random.default_rng([seed, j])
        qi = rng.choice(len(pts), size=min(n_queries, len(pts)), replace=False)
        keys = query_in_chunks(model.query_feature, bottom, pts)
        q = query_in_chunks(model.query_feature, top, pts[qi])
        best = np.argmax(q @ keys.T, axis=1)
        hits += int((np.linalg.norm(pts[best] - pts[qi], axis=1) <= radius).sum())
        total += len(qi)
    return (hits / total if total else float("nan")), total


def occupancy_iou(model: CoCoNet, items, spec: GridSpec, threshold: float = 0.5) -> list[float]:
    """Per-view IoU of thresholded occupancy against the analytic inside-test at voxel centers."""
    pts = spec.voxel_centers()
    out = []
    for view, scene in items:
        grid = model.encode_view(view, spec)
        pred = query_in_chunks(model.query_occupancy, grid, pts) > threshold
        truth = scene.inside(view.cam_pose.apply(pts))
        union = int((pred | truth).sum())
        out.append(int((pred & truth).sum()) / union if union else 1.0)
    return out


def _track_or_hold(featurizer, seq: TrackingSequence, cfg: RansacConfig) -> TrackResult:
    """Track, or hold the first box for the whole sequence if the initial box yields too few points."""
    try:
        return track_sequence(featurizer, seq, seq.boxes[0], cfg)
    except InsufficientMatches:
        boxes = [seq.boxes[0]] * len(seq)
        return TrackResult(boxes, [RigidTransform.identity()] * len(seq), [False] + [True] * (len(seq) - 1),
                           [box_iou(b, g) for b, g in zip(boxes, seq.boxes)])


def evaluate_tracking(model: CoCoNet | None, items: list[TrackItem], cfg: RunConfig, modes=("amodal", "visible")):
    """Mean IoU per sequence for each featurizer mode (``amodal``, ``visible`` or ``oracle``)."""
    spec = cfg.grid.spec()
    ransac = cfg.ransac_config()
    rows = []
    for i, item in enumerate(items):
        row = {"sequence": i, "occlusion": item.occlusion}
        for mode in modes:
            if mode == "oracle":
                feat = OracleFeaturizer(item.sequence, spec, seed=derive_seed(cfg.seed, 7, i))
            else:
                feat = ModelFeaturizer(model, spec, cfg.eval.n_uniform, amodal=(mode == "amodal"),
                                       seed=derive_seed(cfg.seed, 8, i))
            res = _track_or_hold(feat, item.sequence, ransac)
            row[mode] = res.mean_iou
            row[f"{mode}_lost"] = int(sum(res.lost))
            row[f"{mode}_result"] = res
        rows.append(row)
    return rows


def evaluate_alignment(model: CoCoNet, pairs, cfg: RunConfig) -> list[dict]:
    spec = cfg.grid.spec()
    ransac = cfg.ransac_config()
    rows = []
    for j, (va, vb, _scene) in enumerate(pairs):
        truth = compose(vb.cam_pose.inverse(), va.cam_pose)
        try:
            est = align_objects(model, va, vb, spec, ransac, cfg.eval.n_uniform, seed=derive_seed(cfg.seed, 9, j))
        except (NoMatches, InsufficientMatches, NoConsensus):
            est = None
        if est is None:
            rows.append({"pair": j, "errors": (180.0, 180.0, 180.0), "correct": False, "estimate": None, "truth": truth})
            continue
        rows.append({"pair": j, "errors": rotation_errors(est, truth), "correct": rotation_accuracy(est, truth),
                     "estimate": est, "truth": truth})
    return rows


def permutation_chance(rows: list[dict]) -> float:
    """Accuracy expected when estimates carry no information about their pair:
    every estimate scored against every other pair's ground truth."""
    ests = [r["estimate"] for r in rows]
    truths = [r["truth"] for r in rows]
    hits = total = 0
    for i, e in enumerate(ests):
        for j, t in enumerate(truths):
            if i == j:
                continue
            total += 1
            hits += e is not None and rotation_accuracy(e, t)
    return hits / total if total else float("nan")


# ---------------------------------------------------------------------------
# gradient check on the tiny configuration


def tiny_gradcheck(views: list[ViewRecord], grid: "GridSpec | None" = None, seed: int = 0,
                   max_entries: int = 12, h: float = 1e-5) -> tuple[float, dict]:
    """Finite-difference check of the full training loss on an 8^3, 8-channel, 2-block model.

    ``views`` supplies two view pairs (consecutive records). One optimizer step is
    taken first so that no bias sits exactly on an activation kink. Every parameter
    tensor is probed at up to ``max_entries`` random entries; probes whose
    differences straddle a ReLU kink are replaced. Returns the largest relative
    error and the probe statistics.
    """
    from . import autodiff as ad
    from .coconet import TINY_PLAN, ModelConfig
    from .contrastive import NegativeQueue, TrainConfig, pair_losses, train_step

    if len(views) < 4:
        raise ValueError("gradient check needs four views")
    spec = grid or GridSpec.centered((0.0, 0.0, 6.0), 8.0, 8)
    model = CoCoNet(ModelConfig(TINY_PLAN, hidden=32, n_blocks=2, feature_dim=8, seed=seed))
    cfg = TrainConfig(num_negatives=64, n_pos=32, n_occ=32, lr=1e-2, seed=seed)
    pairs = [ViewPair(views[0], views[1]), ViewPair(views[2], views[3])]
    rng = np.random.default_rng(seed)
    queue = NegativeQueue(cfg.num_negatives, 8)
    negs = rng.normal(size=(cfg.num_negatives, 8))
    queue.push(negs / np.linalg.norm(negs, axis=1, keepdims=True))
    train_step(model, pairs, queue, cfg, spec, seed)
    negatives = queue.negatives()

    def build():
        total = None
        for b, pair in enumerate(pairs):
            loss = pair_losses(model, pair, negatives, cfg, spec, seed * 1000 + 10 * b)[0]
            total = loss if total is None else ad.add(total, loss)
        return ad.scale(total, 1.0 / len(pairs))

    tensors = [model.params[n] for n in model.params.names()]
    stats: dict = {}
    err = ad.gradcheck(build, tensors, h=h, max_entries=max_entries, rng=rng, skip_kinks=True, stats=stats)
    return err, stats
