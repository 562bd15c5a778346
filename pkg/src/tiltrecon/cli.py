"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 I/O error. ``CDI3D_LOG`` selects the log level (error, info,
debug).
"""

import argparse
import csv
import json
import logging
import os
from pathlib import Path
import sys

import numpy as np
import torch

from .ablation import ablation_run, default_shapes, format_table
from .camera import TrajectoryConfig, ViewRole, poses_from_json, poses_to_json, tilt_trajectory
from .config import RunConfig, stream_seed
from .diffusion import assign_ref_cond
from .errors import ConfigError, NumericalError, ShapeError
from .interpolate import DVIInterpolator, gap_examples, params_from_tensors
from .io import (load_blob, read_obj, read_pfm, read_pgm, read_ppm, save_blob, write_obj, write_pfm,
                 write_pgm, write_ply, write_ppm)
from .metrics import EvalProtocol, evaluate_protocol, per_view_csv, report_json
from .reconstruct import (LOSS_TERMS, LossWeights, SupervisionSet, SupervisionView, TriPlaneReconstructor,
                          reference_mesh, render_supervision)
from .render import Intrinsics, RenderConfig, RenderedView
from .triplane import AnalyticField, AnalyticShape

log = logging.getLogger("tiltrecon")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def parse_shape(text):
    """``sphere:0.5``, ``torus:0.55,0.18`` or ``box:0.4``; a bare kind takes default sizes."""
    kind, _, sizes = text.partition(":")
    defaults = {"sphere": (0.5,), "torus": (0.55, 0.18), "box": (0.4,)}
    if kind not in defaults:
        raise ConfigError(f"unknown shape {kind!r}")
    size = tuple(float(s) for s in sizes.split(",")) if sizes else defaults[kind]
    try:
        return AnalyticShape(kind, size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def trajectory_config(cfg):
    t = cfg.trajectory
    try:
        return TrajectoryConfig(t.num_main_views, t.num_interp, t.radius, list(t.interp_elevation_pattern))
    except ValueError as exc:
        raise ConfigError(f"trajectory: {exc}") from exc


def intrinsics_for(cfg, size=None):
    w, h = (size, size) if size else (cfg.render.width, cfg.render.height)
    return Intrinsics.from_fov(w, h, cfg.render.fov_deg)


def render_config(cfg):
    r = cfg.render
    return RenderConfig(n_samples=r.n_samples, margin=r.margin, normal_step=r.normal_step, mask_threshold=r.mask_threshold)


def save_views(out_dir, supervision):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sv in enumerate(supervision.views):
        stem = f"{i:03d}_{str(sv.role).replace(':', '-')}"
        write_ppm(out / f"{stem}_rgb.ppm", sv.view.rgb)
        write_pfm(out / f"{stem}_depth.pfm", sv.view.depth)
        write_pfm(out / f"{stem}_normal.pfm", sv.view.normal)
        write_pgm(out / f"{stem}_mask.pgm", sv.view.mask)
        entries.append({"role": str(sv.role), **sv.pose.to_dict(), "rgb": f"{stem}_rgb.ppm",
                        "depth": f"{stem}_depth.pfm", "normal": f"{stem}_normal.pfm", "mask": f"{stem}_mask.pgm"})
    intr = supervision.intrinsics
    doc = {"intrinsics": {"width": intr.width, "height": intr.height, "focal": intr.focal}, "views": entries}
    (out / "views.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_views(views_dir):
    from .camera import CameraPose

    root = Path(views_dir)
    doc = json.loads((root / "views.json").read_text())
    intr = Intrinsics(**doc["intrinsics"])
    views = []
    for e in doc["views"]:
        rv = RenderedView(read_ppm(root / e["rgb"]), read_pfm(root / e["depth"]),
                          read_pfm(root / e["normal"]), read_pgm(root / e["mask"]))
        views.append(SupervisionView(ViewRole.parse(e["role"]), CameraPose.from_dict(e), rv))
    return SupervisionSet(views, intr)


def box_downsample(img, size):
    h, w = img.shape[:2]
    if h == size and w == size:
        return img
    if h % size or w % size:
        raise ShapeError(f"cannot box-downsample {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    return img.reshape(size, fh, size, fw, -1).mean(axis=(1, 3)).reshape(size, size, *img.shape[2:])


def _gaps(supervision, n_main):
    """Group views into gaps: (main i, main i+1, [(slot, pose, rgb), ...])."""
    mains = {sv.role.main_index: sv for sv in supervision.views if sv.role.is_main}
    if len(mains) != n_main:
        raise ConfigError(f"views hold {len(mains)} main views, config expects {n_main}")
    interp = {}
    for sv in supervision.views:
        if sv.role.kind == "interp_right":
            interp.setdefault(sv.role.main_index, []).append(sv)
    gaps = []
    for i in range(n_main):
        j = (i + 1) % n_main
        slots = sorted(interp.get(i, []), key=lambda sv: sv.role.slot)
        gaps.append((mains[i], mains[j], slots))
    return gaps


def make_dvi(cfg, seed):
    d = cfg.dvi
    return DVIInterpolator(image_size=d.image_size, patch_size=d.patch_size, feature_dim=d.feature_dim,
                           hidden=tuple(d.hidden), timesteps=d.timesteps, beta_start=d.beta_start,
                           beta_end=d.beta_end, steps=d.steps, learning_rate=d.learning_rate,
                           batch_size=d.batch_size, seed=seed)


def make_reconstructor(cfg, seed):
    r, tp, fu = cfg.reconstruct, cfg.triplane, cfg.fusion
    weights = LossWeights(r.lambda_lpips, r.lambda_mask, r.lambda_depth, r.lambda_normal, r.lambda_reg)
    return TriPlaneReconstructor(resolution=tp.resolution, channels=tp.channels,
                                 decoder_hidden=tuple(tp.decoder_hidden), steps=r.steps,
                                 learning_rate=r.learning_rate, rays_per_step=r.rays_per_step,
                                 n_samples=r.n_samples, loss_weights=weights, patch_size=fu.patch_size,
                                 embed_dim=fu.embed_dim, margin=cfg.render.margin,
                                 normal_step=cfg.render.normal_step, dtype=r.dtype, seed=seed)


def cmd_trajectory(args, cfg):
    items = tilt_trajectory(trajectory_config(cfg))
    Path(args.out).write_text(poses_to_json(items) + "\n")
    log.info("wrote %d poses to %s", len(items), args.out)


def cmd_render_gt(args, cfg):
    if args.poses:
        items = poses_from_json(Path(args.poses).read_text())
    else:
        items = tilt_trajectory(trajectory_config(cfg))
    if not items:
        raise ConfigError("pose file holds no poses")
    shape = parse_shape(args.shape)
    sup = render_supervision(AnalyticField(shape), items, intrinsics_for(cfg, args.size), render_config(cfg))
    save_views(args.out, sup)
    log.info("rendered %d views of %s into %s", len(items), shape.kind, args.out)


def _training_examples(cfg, sup):
    n = cfg.trajectory.num_interp
    size = cfg.dvi.image_size
    examples = []
    for left, right, slots in _gaps(sup, cfg.trajectory.num_main_views):
        if len(slots) != n:
            raise ConfigError(f"gap after main {left.role.main_index} has {len(slots)} views, expected {n}")
        examples += gap_examples((box_downsample(left.view.rgb, size), left.pose),
                                 (box_downsample(right.view.rgb, size), right.pose),
                                 [(sv.role.slot, sv.pose, box_downsample(sv.view.rgb, size)) for sv in slots], n)
    return examples


def cmd_dvi_train(args, cfg):
    seed = cfg.require_seed()
    if cfg.trajectory.num_interp < 1:
        raise ConfigError("DVI training needs num_interp >= 1")
    if args.views:
        sup = load_views(args.views)
    else:
        shape = parse_shape(args.shape)
        size = cfg.dvi.image_size
        sup = render_supervision(AnalyticField(shape), tilt_trajectory(trajectory_config(cfg)),
                                 intrinsics_for(cfg, size), render_config(cfg))
    model = make_dvi(cfg, stream_seed(seed, "dvi.init")).fit(_training_examples(cfg, sup))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = model.params_
    meta = {"image_shape": list(p.image_shape), "patch_size": p.patch_size, "feature_dim": p.feature_dim,
            "hidden": list(p.hidden), "time_dim": p.time_dim,
            "schedule": {"T": model.timesteps, "beta_start": model.beta_start, "beta_end": model.beta_end}}
    save_blob(out / "dvi.bin", p.weights, meta)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(model.history_):
            w.writerow([i, repr(v)])
    log.info("DVI loss %.4f -> %.4f", model.history_[0], model.history_[-1])


def cmd_dvi_sample(args, cfg):
    seed = cfg.require_seed()
    tensors, meta = load_blob(Path(args.checkpoint) / "dvi.bin")
    sched = meta["schedule"]
    cfg.dvi.timesteps, cfg.dvi.beta_start, cfg.dvi.beta_end = sched["T"], sched["beta_start"], sched["beta_end"]
    model = make_dvi(cfg, 0).load_params(params_from_tensors(tensors, meta))
    sup = load_views(args.views)
    traj = trajectory_config(cfg)
    by_gap = {}
    for role, pose in tilt_trajectory(traj):
        if role.kind == "interp_right":
            by_gap.setdefault(role.main_index, []).append((role, pose))
    mains = {sv.role.main_index: sv for sv in sup.views if sv.role.is_main}
    size = cfg.dvi.image_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_rows = []
    base = stream_seed(seed, "dvi.sample")
    for i in range(traj.num_main_views):
        left, right = mains[i], mains[(i + 1) % traj.num_main_views]
        roles_poses = by_gap.get(i, [])
        images, assignments = model.interpolate(
            (box_downsample(left.view.rgb, size), left.pose), (box_downsample(right.view.rgb, size), right.pose),
            [p for _, p in roles_poses], seed=base + 1000 * i)
        for (role, pose), img, a in zip(roles_poses, images, assignments):
            name = f"{str(role).replace(':', '-')}_rgb.ppm"
            write_ppm(out / name, img)
            ids = {1: i, 2: (i + 1) % traj.num_main_views}
            log_rows.append({"role": str(role), "slot": role.slot, "n": traj.num_interp,
                             "ref_main": ids[a.ref_index], "cond_main": ids[a.cond_index],
                             "ref_index": a.ref_index, "cond_index": a.cond_index, "image": name, **pose.to_dict()})
    (out / "assignments.json").write_text(json.dumps(log_rows, indent=1, sort_keys=True))


def _history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "total", *LOSS_TERMS])
        for h in history:
            w.writerow([h["step"], repr(h["total"]), *(repr(h[k]) for k in LOSS_TERMS)])


def cmd_reconstruct(args, cfg):
    seed = cfg.require_seed()
    sup = load_views(args.views)
    rec = make_reconstructor(cfg, stream_seed(seed, "reconstruct")).fit(sup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in rec.get_params().items()
                       if k != "loss_weights"},
            "loss_weights": vars(rec.loss_weights_), "lpips_term": "not evaluated",
            "final_loss": rec.history_[-1]["total"], "config": cfg.to_dict()}
    save_blob(out / "checkpoint.bin", rec.state_tensors(), meta)
    _history_csv(out / "history.csv", rec.history_)
    run = {"config": cfg.to_dict(), "loss_weights": vars(rec.loss_weights_),
           "unused_terms": {"lambda_lpips": "carried for bookkeeping, no perceptual network is evaluated"},
           "final": rec.history_[-1]}
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True))
    log.info("reconstruction loss %.5f -> %.5f", rec.history_[0]["total"], rec.history_[-1]["total"])


def load_reconstructor(checkpoint_dir):
    tensors, meta = load_blob(Path(checkpoint_dir) / "checkpoint.bin")
    params = dict(meta["params"])
    params["decoder_hidden"] = tuple(params["decoder_hidden"])
    rec = TriPlaneReconstructor(**params)
    return rec.load_state(tensors), meta


def cmd_extract(args, cfg):
    rec, meta = load_reconstructor(args.checkpoint)
    rcfg = RunConfig.from_dict(meta["config"]).reconstruct
    mesh = rec.extract_mesh(args.resolution or rcfg.extract_resolution, args.iso if args.iso is not None else rcfg.iso)
    if mesh.is_empty:
        raise NumericalError("extracted mesh is empty")
    if str(args.out).endswith(".ply"):
        write_ply(args.out, mesh)
    else:
        write_obj(args.out, mesh)
    log.info("mesh with %d vertices, %d faces", len(mesh.vertices), len(mesh.faces))


def eval_protocol(cfg, seed):
    m = cfg.metrics
    return EvalProtocol(rings=list(m.rings), views_per_ring=m.views_per_ring, resolution=m.resolution,
                        radius=cfg.trajectory.radius, fov_deg=cfg.render.fov_deg, n_points=m.n_points,
                        tau=m.tau, iou_resolution=m.iou_resolution, seed=seed)


def cmd_eval(args, cfg):
    seed = cfg.require_seed()
    gen = read_obj(args.gen)
    if args.gt:
        gt = read_obj(args.gt)
    else:
        gt = reference_mesh(parse_shape(args.shape))
    if gen.is_empty or gt.is_empty:
        raise ConfigError("meshes must be non-empty")
    report = evaluate_protocol(gen, gt, eval_protocol(cfg, stream_seed(seed, "metrics")))
    Path(args.out).write_text(report_json(report) + "\n")
    Path(args.out).with_suffix(".csv").write_text(per_view_csv(report))


def cmd_ablate(args, cfg):
    seed = cfg.require_seed()
    shapes = [parse_shape(s) for s in args.shape] if args.shape else default_shapes()
    traj = trajectory_config(cfg)
    table = ablation_run(lambda: make_reconstructor(cfg, stream_seed(seed, "reconstruct")),
                         shapes=shapes, base_trajectory=traj, intrinsics=intrinsics_for(cfg),
                         render_cfg=render_config(cfg), protocol=eval_protocol(cfg, stream_seed(seed, "metrics")),
                         extract_resolution=cfg.reconstruct.extract_resolution, out_dir=args.out)
    sys.stdout.write(format_table(table))


COMMANDS = {
    "trajectory": cmd_trajectory,
    "render-gt": cmd_render_gt,
    "dvi-train": cmd_dvi_train,
    "dvi-sample": cmd_dvi_sample,
    "reconstruct": cmd_reconstruct,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tiltrecon", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("trajectory", parents=[common], help="write the tilt trajectory poses")
    p = sub.add_parser("render-gt", parents=[common], help="render an analytic shape at each pose")
    p.add_argument("--poses", help="pose JSON (default: trajectory from config)")
    p.add_argument("--shape", default="sphere")
    p.add_argument("--size", type=int, help="square image size (default: render section)")
    p = sub.add_parser("dvi-train", parents=[common], help="train the interpolation denoiser")
    p.add_argument("--views", help="views directory from render-gt")
    p.add_argument("--shape", default="sphere")
    p = sub.add_parser("dvi-sample", parents=[common], help="synthesize interpolated views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", required=True)
    p = sub.add_parser("reconstruct", parents=[common], help="fit a tri-plane to a views directory")
    p.add_argument("--views", required=True)
    p = sub.add_parser("extract", parents=[common], help="extract a colored mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--iso", type=float)
    p = sub.add_parser("eval", parents=[common], help="evaluate a mesh against a reference")
    p.add_argument("--gen", required=True)
    p.add_argument("--gt", help="reference mesh OBJ")
    p.add_argument("--shape", default="sphere", help="analytic reference when --gt is absent")
    p = sub.add_parser("ablate", parents=[common], help="trajectory ablation table")
    p.add_argument("--shape", action="append", help="repeatable; default sphere and torus")
    return parser


def configure_logging():
    level = os.environ.get("CDI3D_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg.seed = args.seed
        if args.threads:
            torch.set_num_threads(args.threads)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ShapeError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
