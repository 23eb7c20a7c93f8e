"""Acceptance suite: one or more tests per criterion, summarized at the end of the run.

The learning-signal, tracking and occupancy criteria share one full default run
(generate, 2000 training steps, evaluation) driven through the CLI. Set
COCONETS_ACCEPTANCE_RUN to a directory to keep that run and reuse finished stages.
"""

import json
import math
import os
import time

import numpy as np
import pytest
import yaml

from coconets.alignment import (
    MatchSet,
    OracleFeaturizer,
    RansacConfig,
    box_iou,
    procrustes,
    ransac_align,
    rotation_accuracy,
    rotation_errors,
    track_sequence,
)
from coconets.cli import main
from coconets.config import RunConfig, from_dict
from coconets.featuregrid import GridSpec, VoxelFeatureGrid, interpolation_matrix, sample_world, trilinear_sample, warp_grid
from coconets.autodiff import Tensor
from coconets.geometry import (
    Box3D,
    CameraIntrinsics,
    EulerAngles,
    RigidTransform,
    compose,
    project,
    project_points,
    random_rotation,
    rot_x,
    rot_y,
    rot_z,
    rotation_from_euler,
    unproject,
)
from coconets.pipeline import generate_tracking_sequences, generate_training_views, tiny_gradcheck
from coconets.synthscene import file_checksum

BASELINES = os.path.join(os.path.dirname(__file__), "baselines.json")
BASELINE_TOL = 0.05


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# ---------------------------------------------------------------------------
# 1. gradients


@pytest.mark.criterion(1, "gradient integrity on the tiny config")
def test_gradient_integrity(record_property):
    cfg = from_dict({"camera": {"width": 32, "height": 32}, "data": {"train_scenes": 1, "views_per_scene": 4}})
    groups, _ = generate_training_views(cfg)
    (err, stats), secs = timed(lambda: tiny_gradcheck(groups[0], seed=0))
    record_property("max_rel_err", f"{err:.2e}")
    record_property("probes", stats["probed"])
    record_property("seconds", round(secs))
    assert err < 1e-4
    assert stats["probed"] > 500
    assert secs < 300


# ---------------------------------------------------------------------------
# 2. geometry


def _rotation_about_center(spec, r):
    c = spec.center
    return RigidTransform(r, c - r @ c)


@pytest.mark.criterion(2, "geometry oracles")
def test_geometry_oracles(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    # projection round trip, scalar and vectorized
    k = CameraIntrinsics.from_fov(64, 48, 60.0)
    pix = rng.uniform((0, 0), (64, 48), size=(10_000, 2))
    depth = rng.uniform(0.1, 50.0, size=10_000)
    worst = max(float(np.abs(project(unproject(p, d, k), k) - p).max()) for p, d in zip(pix, depth))
    pts = np.stack([(pix[:, 0] - k.cx) * depth / k.fx, (pix[:, 1] - k.cy) * depth / k.fy, depth], axis=-1)
    uv, valid = project_points(pts, k)
    assert worst < 1e-9 and valid.all() and np.abs(uv - pix).max() < 1e-9
    record_property("round_trip", f"{worst:.1e}")

    # partition of unity
    res = (5, 6, 7)
    mem = rng.uniform(-0.5, np.array(res) - 0.5, size=(100_000, 3))
    a, inside = interpolation_matrix(mem, res)
    assert inside.all() and a.data.min() >= 0.0
    assert np.abs(np.asarray(a.sum(axis=1)).ravel() - 1.0).max() < 1e-9

    # reproduction of a trilinear function f = affine + xyz
    spec = GridSpec((-1, 0, 2), (3, 2, 5), (8, 4, 6))
    f = lambda p: 1.5 + 2 * p[:, 0] + 3 * p[:, 1] - p[:, 2] + 0.5 * p[:, 0] * p[:, 1] * p[:, 2] - p[:, 1] * p[:, 2]
    g = VoxelFeatureGrid(spec, Tensor(f(spec.voxel_centers()).reshape(8, 4, 6, 1)))
    lo = np.array(spec.world_min) + spec.voxel_size / 2
    hi = np.array(spec.world_max) - spec.voxel_size / 2
    q = rng.uniform(lo, hi, size=(20_000, 3))
    out, inside = sample_world(g, q)
    assert inside.all()
    assert np.abs(out.data[:, 0] - f(q)).max() < 1e-9

    # 90 degree warps are voxel permutations
    n = 6
    vals = rng.normal(size=(n, n, n, 3))
    cube = GridSpec((-2, -2, -2), (4, 4, 4), (n, n, n))
    mid = (n - 1) / 2
    idx = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), -1).reshape(-1, 3)
    for r in (rot_x(math.pi / 2), rot_y(math.pi / 2), rot_z(math.pi / 2), rot_z(math.pi)):
        warped = warp_grid(VoxelFeatureGrid(cube, Tensor(vals)), _rotation_about_center(cube, r)).values.data
        src = np.rint((idx - mid) @ r + mid).astype(int)  # R^T applied to each row
        expect = vals[src[:, 0], src[:, 1], src[:, 2]].reshape(vals.shape)
        assert np.array_equal(warped, expect)
    secs = time.perf_counter() - t0
    record_property("seconds", round(secs, 1))
    assert secs < 60


# ---------------------------------------------------------------------------
# 3. registration


@pytest.mark.criterion(3, "registration oracles")
def test_registration_oracles(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    for _ in range(100):
        truth = RigidTransform(random_rotation(rng), rng.normal(size=3))
        src = rng.normal(size=(50, 3)) * 2
        fit = procrustes(src, truth.apply(src))
        assert np.abs(fit.rotation - truth.rotation).max() < 1e-9
        assert np.abs(fit.translation - truth.translation).max() < 1e-9

    ok = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        truth = RigidTransform(random_rotation(rng), rng.normal(size=3))
        src = rng.uniform(-2, 2, size=(200, 3))
        dst = truth.apply(src)
        bad = rng.permutation(200)[:100]
        dst[bad] = rng.uniform(-4, 4, size=(100, 3))
        fit, _ = ransac_align(MatchSet(src, dst, np.ones(200)), RansacConfig(iterations=500, inlier_radius=0.05, seed=seed))
        rot_ok = max(abs(e) for e in rotation_errors(fit, truth)) < 1.0
        ok += rot_ok and np.abs(fit.translation - truth.translation).max() < 1e-3
    secs = time.perf_counter() - t0
    record_property("ransac_seeds_ok", f"{ok}/100")
    record_property("seconds", round(secs, 1))
    assert ok == 100
    assert secs < 120


# ---------------------------------------------------------------------------
# 4. tracking with oracle correspondences


@pytest.mark.criterion(4, "oracle tracking")
def test_oracle_tracking(record_property):
    t0 = time.perf_counter()
    cfg = from_dict({"data": {"track_sequences": 10}})
    spec = cfg.grid.spec()
    ious = []
    for i, item in enumerate(generate_tracking_sequences(cfg)):
        seq = item["sequence"]
        assert len(seq) == 10
        res = track_sequence(OracleFeaturizer(seq, spec, seed=i), seq, seq.boxes[0], cfg.ransac_config())
        ious.append(res.mean_iou)
    secs = time.perf_counter() - t0
    record_property("min_mean_iou", f"{min(ious):.4f}")
    record_property("seconds", round(secs, 1))
    assert min(ious) > 0.99
    assert secs < 60


# ---------------------------------------------------------------------------
# 7. alignment metric


def _euler_deg(yaw, pitch, roll):
    return RigidTransform(rotation_from_euler(EulerAngles(*(math.radians(x) for x in (yaw, pitch, roll)))), np.zeros(3))


@pytest.mark.criterion(7, "10 degree rule and box IoU hand cases")
def test_alignment_metric_fidelity():
    cube = Box3D((0, 0, 0), (0.5, 0.5, 0.5))
    assert box_iou(cube, cube) == 1.0
    # shifted by half an edge: overlap 1/2, union 3/2
    assert abs(box_iou(cube, Box3D((0.5, 0, 0), (0.5, 0.5, 0.5))) - 1 / 3) < 1e-12
    assert box_iou(cube, Box3D((1.0, 0, 0), (0.5, 0.5, 0.5))) == 0.0
    truth = RigidTransform(random_rotation(np.random.default_rng(2)), np.zeros(3))
    cases = {(11, 0, 0): False, (0, 11, 0): False, (0, 0, 11): False, (9, 9, 9): True, (0, 0, 0): True, (-9.9, 0, 0): True}
    for delta, ok in cases.items():
        assert rotation_accuracy(compose(_euler_deg(*delta), truth), truth) is ok, delta


# ---------------------------------------------------------------------------
# full default run (criteria 5, 6, 8)


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    root = os.environ.get("COCONETS_ACCEPTANCE_RUN") or str(tmp_path_factory.mktemp("acceptance"))
    data, run = os.path.join(root, "data"), os.path.join(root, "run")
    ckpt = os.path.join(run, "model.ccn")
    stages = [
        ("data/manifest.json", ["generate", "--out", data]),
        ("run/train.json", ["train", "--data", data, "--out", run]),
        ("untrained/match.json", ["eval-match", "--data", data, "--out", os.path.join(root, "untrained")]),
        ("match/match.json", ["eval-match", "--data", data, "--checkpoint", ckpt, "--out", os.path.join(root, "match")]),
        ("track/track.json", ["eval-track", "--data", data, "--checkpoint", ckpt, "--out", os.path.join(root, "track")]),
        ("occ/occ.json", ["eval-occ", "--data", data, "--checkpoint", ckpt, "--out", os.path.join(root, "occ")]),
    ]
    seconds = {}
    for marker, argv in stages:
        if os.path.exists(os.path.join(root, marker)):
            continue
        t = time.perf_counter()
        assert main(argv) == 0, argv
        seconds[argv[0] + ("" if "--checkpoint" in argv or argv[0] != "eval-match" else "-untrained")] = time.perf_counter() - t
    return root, seconds


@pytest.mark.criterion(5, "learning signal")
def test_learning_signal(full_run, record_property):
    root, _ = full_run
    rows = np.genfromtxt(os.path.join(root, "run", "log.csv"), delimiter=",", names=True)
    assert len(rows) == RunConfig().train.steps
    first, last = float(rows["l_nce"][0]), float(np.mean(rows["l_nce"][-50:]))
    before = read_json(os.path.join(root, "untrained", "match.json"))["value"]
    after = read_json(os.path.join(root, "match", "match.json"))["value"]
    train_minutes = float(np.sum(rows["wall_ms"])) / 60_000
    record_property("l_nce", f"{first:.3f}->{last:.3f}")
    record_property("top1", f"{before:.3f}->{after:.3f} ({after / before:.2f}x)")
    record_property("train_min", round(train_minutes, 1))
    assert last <= 0.5 * first
    assert after >= 5 * before
    assert train_minutes < 60


@pytest.mark.criterion(5, "learning signal")
def test_learning_signal_matches_committed_baselines(full_run):
    root, _ = full_run
    base = read_json(BASELINES)
    assert base["config_hash"] == read_json(os.path.join(root, "match", "match.json"))["config_hash"]
    rows = np.genfromtxt(os.path.join(root, "run", "log.csv"), delimiter=",", names=True)
    measured = {
        "l_nce_step0": float(rows["l_nce"][0]),
        "l_nce_last50": float(np.mean(rows["l_nce"][-50:])),
        "top1_untrained": read_json(os.path.join(root, "untrained", "match.json"))["value"],
        "top1_trained": read_json(os.path.join(root, "match", "match.json"))["value"],
    }
    for key, value in measured.items():
        assert abs(value - base[key]) <= BASELINE_TOL, (key, value, base[key])


@pytest.mark.criterion(6, "end-to-end tracking")
def test_tracking_end_to_end(full_run, record_property):
    root, _ = full_run
    report = read_json(os.path.join(root, "track", "track.json"))
    extra = report["extra"]
    assert report["n"] == RunConfig().data.track_sequences
    record_property("amodal", f"{extra['amodal_mean_iou']:.3f}")
    record_property("occluded", f"amodal {extra['amodal_occluded_mean_iou']:.3f} vs visible {extra['visible_occluded_mean_iou']:.3f}")
    assert extra["occluded_sequences"] > 0
    assert extra["amodal_mean_iou"] >= 0.5
    assert extra["amodal_occluded_mean_iou"] > extra["visible_occluded_mean_iou"]


@pytest.mark.criterion(8, "occupancy IoU at 32^3")
def test_occupancy_head(full_run, record_property):
    root, _ = full_run
    report = read_json(os.path.join(root, "occ", "occ.json"))
    assert report["extra"]["threshold"] == 0.5
    record_property("iou", f"{report['value']:.3f}")
    assert report["value"] >= 0.7


# ---------------------------------------------------------------------------
# 9. determinism

SMALL = {
    "grid": {"resolution": 16},
    "camera": {"width": 32, "height": 24},
    "data": {"train_scenes": 4, "views_per_scene": 4, "track_sequences": 2, "track_frames": 4,
             "align_pairs": 4, "occ_views": 2, "match_pairs": 2},
    "train": {"n_pos": 32, "n_occ": 32, "num_negatives": 64, "steps": 6},
    "eval": {"n_uniform": 256, "match_queries": 32},
    "ransac": {"iterations": 100},
}


def _pipeline(root, cfg, resume_at=None):
    data, run = os.path.join(root, "data"), os.path.join(root, "run")
    assert main(["generate", "--config", cfg, "--out", data]) == 0
    if resume_at is None:
        assert main(["train", "--data", data, "--out", run]) == 0
    else:
        assert main(["train", "--data", data, "--out", run, "--steps", str(resume_at)]) == 0
        assert main(["train", "--data", data, "--out", run, "--resume", os.path.join(run, "model.ccn")]) == 0
    ckpt = os.path.join(run, "model.ccn")
    for cmd in ("eval-match", "eval-track", "eval-align", "eval-occ"):
        assert main([cmd, "--data", data, "--checkpoint", ckpt, "--out", os.path.join(root, cmd)]) == 0
    digests = {name: file_checksum(os.path.join(data, name)) for name in sorted(os.listdir(data))}
    digests["model.ccn"] = file_checksum(ckpt)
    for cmd, name in (("eval-match", "match.json"), ("eval-track", "track.json"), ("eval-align", "align.json"),
                      ("eval-occ", "occ.json")):
        digests[name] = file_checksum(os.path.join(root, cmd, name))
    digests["align.csv"] = file_checksum(os.path.join(root, "eval-align", "align.csv"))
    return digests


@pytest.mark.criterion(9, "bitwise determinism with resume")
def test_determinism(tmp_path, record_property):
    cfg = tmp_path / "small.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    a = _pipeline(str(tmp_path / "a"), str(cfg))
    b = _pipeline(str(tmp_path / "b"), str(cfg))
    c = _pipeline(str(tmp_path / "c"), str(cfg), resume_at=3)
    record_property("files", len(a))
    assert a == b
    assert a == c
