"""Command line: generate, train, eval-track, eval-align, eval-occ, eval-match, render."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from . import autodiff as ad
from .alignment import write_alignment_csv, write_tracking_csv
from .coconet import CoCoNet, amodal_feature_cloud, pca_rgb, project_feature_cloud, query_in_chunks, surface_points
from .config import ConfigError, RunConfig, load_config
from .contrastive import Trainer, occ_checkpoint_path
from .geometry import RigidTransform
from .pipeline import (
    ALIGN,
    MATCH,
    cross_view_accuracy,
    evaluate_alignment,
    evaluate_tracking,
    generate_all,
    load_occupancy,
    load_pairs,
    load_tracking,
    load_training_data,
    occupancy_iou,
    permutation_chance,
    tiny_gradcheck,
)
from .synthscene import FormatError, read_dataset

log = logging.getLogger("coconets")

CONFIG_NAME = "config.yaml"
CHECKPOINT_NAME = "model.ccn"
GRADCHECK_TOL = 1e-4
OCCLUDED = 0.3  # occlusion share that marks a tracking sequence as occluded


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config resolution


def _parse_set(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def resolve_config(args, *fallback_dirs) -> RunConfig:
    """--config, else the first config.yaml found next to the inputs, then overrides."""
    path = args.config
    if path is None:
        for d in fallback_dirs:
            if d and os.path.isfile(os.path.join(d, CONFIG_NAME)):
                path = os.path.join(d, CONFIG_NAME)
                break
    overrides = _parse_set(getattr(args, "set", None))
    overrides.update({
        "seed": args.seed,
        "grid.resolution": args.grid,
        "ransac.iterations": args.ransac_iters,
    })
    for key, attr in (("train.steps", "steps"), ("train.tau", "tau"), ("train.lr", "lr")):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    if getattr(args, "oracle", False):
        overrides["eval.oracle"] = True
    return load_config(path, overrides)


def _prepare_out(path: str, cfg: RunConfig) -> None:
    os.makedirs(path, exist_ok=True)
    cfg.dump(os.path.join(path, CONFIG_NAME))


def write_metrics(path: str, metric: str, value: float, n: int, cfg: RunConfig, extra: dict | None = None) -> dict:
    report = {"metric": metric, "value": value, "n": n, "config_hash": cfg.hash(), "extra": extra or {}}
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def load_models(cfg: RunConfig, checkpoint: str | None) -> tuple[CoCoNet, CoCoNet]:
    """(feature model, occupancy/rgb model); both are the same object in joint mode.

    Without a checkpoint the untrained initialization is returned.
    """
    model = CoCoNet(cfg.model_config())
    occ = model
    if cfg.train.mode == "separate":
        occ = CoCoNet(replace(cfg.model_config(), seed=cfg.seed + 1))
    if checkpoint is not None:
        ad.load_checkpoint(_require(checkpoint, "checkpoint"), model.params)
        if occ is not model:
            ad.load_checkpoint(_require(occ_checkpoint_path(checkpoint), "occupancy checkpoint"), occ.params)
    return model, occ


def _checkpoint_dir(args) -> str | None:
    return os.path.dirname(os.path.abspath(args.checkpoint)) if args.checkpoint else None


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    _prepare_out(args.out, cfg)
    manifest = generate_all(cfg, args.out)
    print(json.dumps({"counts": manifest["counts"], "config_hash": cfg.hash()}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, args.data)
    _require(os.path.join(args.data, "train.ccd"), "training set")
    _prepare_out(args.out, cfg)
    if args.gradcheck:
        views = read_dataset(os.path.join(args.data, "train.ccd"))[:4]
        err, stats = tiny_gradcheck(views, seed=cfg.seed)
        ok = err < GRADCHECK_TOL
        write_metrics(os.path.join(args.out, "gradcheck.json"), "gradcheck_max_rel_error", err, stats["probed"],
                      cfg, {"skipped_kink_probes": stats["skipped"], "tolerance": GRADCHECK_TOL, "passed": ok})
        print(f"gradcheck max relative error {err:.3e} over {stats['probed']} entries: {'ok' if ok else 'FAILED'}")
        return 0 if ok else 1

    spec = cfg.grid.spec()
    data = load_training_data(args.data, spec)
    model, occ = load_models(cfg, None)
    trainer = Trainer(data, cfg.train_config(), model, occ_model=occ if occ is not model else None)
    if args.resume:
        trainer.load(_require(args.resume, "checkpoint"))
    ckpt = os.path.join(args.out, CHECKPOINT_NAME)

    def progress(row):
        if row["step"] % 50 == 0:
            log.info("step %d  l_nce %.4f  l_occ %.4f  l_rgb %.4f", row["step"], row["l_nce"], row["l_occ"], row["l_rgb"])

    trainer.train(cfg.train.steps, log_path=os.path.join(args.out, "log.csv"), checkpoint_path=ckpt, callback=progress)
    last = trainer.history[-1] if trainer.history else {}
    write_metrics(os.path.join(args.out, "train.json"), "final_l_nce", float(last.get("l_nce", float("nan"))),
                  trainer.step, cfg, {"checkpoint": ckpt, "resumed_from": args.resume})
    print(f"trained to step {trainer.step}; checkpoint {ckpt}")
    return 0


def cmd_eval_track(args) -> int:
    cfg = resolve_config(args, _checkpoint_dir(args), args.data)
    items = load_tracking(args.data)
    _prepare_out(args.out, cfg)
    if cfg.eval.oracle:
        modes = ("oracle",)
        model = None
    else:
        modes = ("amodal", "visible")
        model, _ = load_models(cfg, args.checkpoint)
    rows = evaluate_tracking(model, items, cfg, modes)
    seq_dir = os.path.join(args.out, "sequences")
    os.makedirs(seq_dir, exist_ok=True)
    for item, row in zip(items, rows):
        for mode in modes:
            write_tracking_csv(os.path.join(seq_dir, f"seq{row['sequence']:03d}_{mode}.csv"),
                               row[f"{mode}_result"], item.sequence.boxes)
    extra = {}
    occluded = [r for r in rows if r["occlusion"] >= OCCLUDED]
    for mode in modes:
        extra[f"{mode}_mean_iou"] = float(np.mean([r[mode] for r in rows]))
        extra[f"{mode}_occluded_mean_iou"] = float(np.mean([r[mode] for r in occluded])) if occluded else None
        extra[f"{mode}_lost_frames"] = int(sum(r[f"{mode}_lost"] for r in rows))
    extra["occluded_sequences"] = len(occluded)
    extra["per_sequence"] = [{k: v for k, v in r.items() if not k.endswith("_result")} for r in rows]
    main = modes[0]
    report = write_metrics(os.path.join(args.out, "track.json"), f"tracking_mean_iou_{main}",
                           extra[f"{main}_mean_iou"], len(rows), cfg, extra)
    print(f"{report['metric']} {report['value']:.4f} over {len(rows)} sequences")
    return 0


def cmd_eval_align(args) -> int:
    from scipy.stats import binomtest

    cfg = resolve_config(args, _checkpoint_dir(args), args.data)
    pairs = load_pairs(args.data, ALIGN)
    _prepare_out(args.out, cfg)
    model, _ = load_models(cfg, args.checkpoint)
    rows = evaluate_alignment(model, pairs, cfg)
    write_alignment_csv(os.path.join(args.out, "align.csv"),
                        [(r["pair"], *r["errors"], int(r["correct"])) for r in rows])
    k = sum(r["correct"] for r in rows)
    n = len(rows)
    chance = permutation_chance(rows)
    # chance of exactly 0 or 1 would make the test degenerate; clip into the open interval
    p0 = min(max(chance, 1.0 / (n * n)), 1.0 - 1.0 / (n * n))
    pval = float(binomtest(k, n, p0).pvalue) if n else float("nan")
    report = write_metrics(os.path.join(args.out, "align.json"), "alignment_accuracy", k / n if n else float("nan"),
                           n, cfg, {"permutation_chance": chance, "binomial_p_value": pval, "correct": k})
    print(f"alignment_accuracy {report['value']:.4f} ({k}/{n}); chance {chance:.4f}, binomial p {pval:.3g}")
    return 0


def cmd_eval_occ(args) -> int:
    cfg = resolve_config(args, _checkpoint_dir(args), args.data)
    items = load_occupancy(args.data)
    _prepare_out(args.out, cfg)
    _, occ = load_models(cfg, args.checkpoint)
    ious = occupancy_iou(occ, items, cfg.grid.spec(), cfg.eval.occ_threshold)
    report = write_metrics(os.path.join(args.out, "occ.json"), "occupancy_iou", float(np.mean(ious)), len(ious), cfg,
                           {"per_view": ious, "threshold": cfg.eval.occ_threshold})
    print(f"occupancy_iou {report['value']:.4f} over {len(ious)} views")
    return 0


def cmd_eval_match(args) -> int:
    cfg = resolve_config(args, _checkpoint_dir(args), args.data)
    pairs = load_pairs(args.data, MATCH)
    _prepare_out(args.out, cfg)
    model, _ = load_models(cfg, args.checkpoint)
    acc, n = cross_view_accuracy(model, pairs, cfg.grid.spec(), cfg.eval.match_queries, cfg.seed)
    report = write_metrics(os.path.join(args.out, "match.json"), "cross_view_top1", acc, n, cfg,
                           {"pairs": len(pairs), "radius_voxels": 1})
    print(f"cross_view_top1 {report['value']:.4f} over {n} queries")
    return 0


def _save_png(path: str, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def cmd_render(args) -> int:
    cfg = resolve_config(args, _checkpoint_dir(args), args.data)
    path = _require(os.path.join(args.data, f"{args.set_name}.ccd"), "dataset")
    views = read_dataset(path)
    if not 0 <= args.index < len(views):
        raise CliError(f"index {args.index} outside 0..{len(views) - 1}")
    view = views[args.index]
    _prepare_out(args.out, cfg)
    written = ["rgb.png", "depth.png"]
    _save_png(os.path.join(args.out, "rgb.png"), view.rgb)
    d = view.depth
    hit = d > 0
    depth_img = np.zeros_like(d)
    if hit.any():
        lo, hi = d[hit].min(), d[hit].max()
        depth_img[hit] = 1.0 - 0.8 * (d[hit] - lo) / max(hi - lo, 1e-12)  # near is bright
    _save_png(os.path.join(args.out, "depth.png"), depth_img)

    spec = cfg.grid.spec()
    model, occ = load_models(cfg, args.checkpoint)
    with ad.no_grad():
        grid = occ.encode_view(view, spec)
        w, h, dd = spec.resolution
        centers = spec.voxel_centers().reshape(w, h, dd, 3)[:, h // 2]  # plane through the grid center
        occ_slice = query_in_chunks(occ.query_occupancy, grid, centers.reshape(-1, 3)).reshape(w, dd)
        _save_png(os.path.join(args.out, "occ_slice.png"), occ_slice.T[::-1])  # far rows on top
        fgrid = grid if model is occ else model.encode_view(view, spec)
        pts = surface_points(view)
        cloud = amodal_feature_cloud(model, fgrid, pts)
    img = project_feature_cloud(cloud, RigidTransform.identity(), view.intrinsics)
    _save_png(os.path.join(args.out, "features.png"), pca_rgb(img.features, img.mask))
    written += ["occ_slice.png", "features.png"]
    print(" ".join(os.path.join(args.out, f) for f in written))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config; defaults fill every missing key")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--grid", type=int, help="grid resolution per axis")
    common.add_argument("--ransac-iters", type=int, dest="ransac_iters", help="RANSAC iterations")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coconets", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write all synthetic datasets").set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="contrastive training")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--tau", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--gradcheck", action="store_true", help="only run the tiny-config gradient check")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("eval-track", cmd_eval_track, "tracking mean IoU, amodal and visible-only"),
        ("eval-align", cmd_eval_align, "cross-view alignment accuracy"),
        ("eval-occ", cmd_eval_occ, "occupancy IoU against analytic inside-tests"),
        ("eval-match", cmd_eval_match, "top-1 cross-view feature matching"),
        ("render", cmd_render, "PNG diagnostics of one view"),
    ):
        e = sub.add_parser(name, parents=[common], help=help_)
        e.add_argument("--data", required=True)
        e.add_argument("--checkpoint", help="trained weights; omitted means the untrained model")
        if name == "eval-track":
            e.add_argument("--oracle", action="store_true", help="ground-truth correspondences")
        if name == "render":
            e.add_argument("--set-name", default="train", dest="set_name")
            e.add_argument("--index", type=int, default=0)
        e.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, FormatError, ad.CheckpointError, CliError, ValueError) as exc:
        print(f"coconets {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
