"""Command line entry point: ``trajsplat synth|partition|train|render|eval``.

Exit status is 0 on success, 1 for invalid input or workspace state and 2
for filesystem errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import config_hash, load_config, save_config
from .errors import ValidationError, WorkspaceError
from .graph import assign_points, bfs_segment, build_graph, read_partition, render_region_map, write_edges, write_partition
from .optim.metrics import psnr, ssim
from .optim.train import TrainConfig, train_global_coarse, train_region, write_loss_csv
from .progressive import ProgressiveConfig, composite_buffers, rank_regions
from .scene_io import SparseModel, read_image, write_image, write_sidecar, write_sparse_model
from .splat.gaussians import concat, load_gaussians, save_gaussians
from .splat.raster import rasterize
from .synth import SynthConfig, generate_synthetic_scene
from .workspace import Workspace, file_digest, parse_view_spec

log = logging.getLogger("trajsplat")

GAUSSIANS = "gaussians.tggs"
TRAIN_CFG = "train.cfg"


def _image_name(view):
    return view.image_ref or f"view_{view.id:04d}.ppm"


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    cfg = load_config(SynthConfig, args.config)
    ws = Workspace(args.out)
    if ws.root.exists() and any(ws.root.iterdir()):
        if not args.force:
            raise WorkspaceError(f"{ws.root} is not empty (use --force to overwrite)")
        shutil.rmtree(ws.root)
    gt, model, images = generate_synthetic_scene(cfg)
    named = [replace(v, image_ref=_image_name(v)) for v in model.views]
    model = SparseModel(named, model.points, model.match_edges)
    write_sparse_model(model, ws.sparse_dir)
    ws.images_dir.mkdir(parents=True, exist_ok=True)
    for v, img in zip(model.views, images):
        write_image(img, ws.images_dir / v.image_ref)
    (ws.root / "gt").mkdir(exist_ok=True)
    save_gaussians(gt, ws.root / "gt" / GAUSSIANS)
    save_config(cfg, ws.root / "synth.cfg")
    ws.update_manifest(
        source="synthetic",
        seed=cfg.rng_seed,
        synth_hash=config_hash(cfg),
        scene_hash=ws.scene_hash(),
        num_views=len(model.views),
        holdout_every=8,
    )
    print(f"wrote {len(model.views)} views, {len(model.points)} points, {len(gt)} Gaussians to {ws.root}")


# ---------------------------------------------------------------------------
# partition


def cmd_partition(args):
    ws = Workspace(args.workspace)
    manifest = ws.manifest()
    model = ws.load_model()
    if ws.partition_path.exists() and not args.force:
        old_k = manifest.get("k")
        if old_k is not None and int(old_k) != args.k and (ws.root / "regions").exists():
            raise WorkspaceError(f"workspace already partitioned with k={old_k} (use --force to replace)")
    graph = build_graph(model)
    part = assign_points(bfs_segment(graph, args.k), model)
    (ws.root / "graph").mkdir(exist_ok=True)
    write_edges(graph, ws.root / "graph" / "edges.txt")
    ws.partition_path.parent.mkdir(parents=True, exist_ok=True)
    write_partition(part, ws.partition_path)
    render_region_map(part, model, ws.partition_path.parent / "regions.ppm")
    ws.update_manifest(k=args.k, partition_hash=file_digest([ws.partition_path]))
    for i, size in enumerate(part.sizes()):
        print(f"region {i}: {size} cameras, {len(part.points(i))} points")


# ---------------------------------------------------------------------------
# train


def _load_train_config(ws, path, force):
    cfg = load_config(TrainConfig, path) if path else TrainConfig()
    h = config_hash(cfg)
    manifest = ws.manifest()
    old = manifest.get("train_hash")
    if old is not None and old != h and not force:
        raise WorkspaceError(f"workspace was trained with config {old}, this config is {h} (use --force)")
    return cfg, h


def _seeded(cfg, manifest, tag):
    seed = int(manifest.get("seed", 0))
    mixed = np.random.SeedSequence([seed, cfg.rng_seed, tag]).generate_state(1)[0]
    return replace(cfg, rng_seed=int(mixed))


def cmd_train(args):
    ws = Workspace(args.workspace)
    manifest = ws.manifest()
    cfg, h = _load_train_config(ws, args.config, args.force)
    model = ws.load_model()
    images = ws.load_images(model)
    backend = args.backend
    targets = []
    if args.all:
        if not ws.partition_path.exists():
            raise WorkspaceError("no partition; run `trajsplat partition` first")
        targets = list(range(int(manifest["k"]))) + ["global"]
    elif args.use_global:
        targets = ["global"]
    else:
        targets = [args.region]
    graph = build_graph(model)
    part = None
    for target in targets:
        t0 = time.perf_counter()
        if target == "global":
            out_dir = ws.global_dir
            res = train_global_coarse(model, _seeded(cfg, manifest, 1_000_000), images, backend)
        else:
            if not ws.partition_path.exists():
                raise WorkspaceError("no partition; run `trajsplat partition` first")
            part = part or read_partition(ws.partition_path)
            out_dir = ws.region_dir(target)
            res = train_region(model, part, target, _seeded(cfg, manifest, target), images, graph, backend)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_gaussians(res.gaussians, out_dir / GAUSSIANS)
        write_loss_csv(res.history, out_dir / "loss.csv")
        ws.write_stamp(out_dir, train_hash=h, partition_hash=manifest.get("partition_hash", "none"))
        elapsed = time.perf_counter() - t0
        ws.log_timing(f"train {target}", elapsed)
        print(f"{target}: {res.initial_count} -> {len(res.gaussians)} Gaussians, "
              f"final loss {res.history[-1][2]:.5f}")
    save_config(cfg, ws.root / TRAIN_CFG)
    ws.update_manifest(train_hash=h)


# ---------------------------------------------------------------------------
# render


def _load_set(ws, directory, manifest, force):
    path = Path(directory) / GAUSSIANS
    if not path.exists():
        raise WorkspaceError(f"missing trained set {path}")
    expected = manifest.get("train_hash")
    if expected is not None:
        ws.check_stamp(directory, "train_hash", expected, force)
    return load_gaussians(path)


def _parse_mode(mode):
    if mode in ("progressive", "naive"):
        return mode, None
    if mode.startswith("region="):
        try:
            return "region", int(mode.split("=", 1)[1])
        except ValueError:
            pass
    raise ValidationError(f"bad render mode {mode!r} (progressive, naive or region=<i>)")


def _render_settings(ws):
    p = ws.root / TRAIN_CFG
    return load_config(TrainConfig, p) if p.exists() else TrainConfig()


def cmd_render(args):
    ws = Workspace(args.workspace)
    manifest = ws.manifest()
    model = ws.load_model()
    kind, region = _parse_mode(args.mode)
    k = int(manifest.get("k", 0))
    if k <= 0:
        raise WorkspaceError("no partition; run `trajsplat partition` first")
    tcfg = _render_settings(ws)
    bg = tuple(tcfg.background)
    pcfg = ProgressiveConfig(beta=args.beta, lam=tcfg.lam, background=bg)
    holdout = int(manifest.get("holdout_every", tcfg.holdout_every))
    ids = parse_view_spec(args.views, model, holdout)
    t0 = time.perf_counter()

    if kind == "region":
        if not 0 <= region < k:
            raise ValidationError(f"region {region} outside [0, {k})")
        sets = [_load_set(ws, ws.region_dir(region), manifest, args.force)]
        name = f"region{region}"
    else:
        sets = [_load_set(ws, ws.region_dir(i), manifest, args.force) for i in range(k)]
        name = kind
    global_set = None
    if kind == "progressive":
        if not (ws.global_dir / GAUSSIANS).exists():
            raise WorkspaceError("progressive mode needs the global set; run `trajsplat train --global`")
        global_set = _load_set(ws, ws.global_dir, manifest, args.force)
    merged = concat(sets) if kind == "naive" else None

    out = ws.render_dir(name)
    out.mkdir(parents=True, exist_ok=True)
    for vid in ids:
        view = model.view(vid)
        if kind == "progressive":
            renders = [rasterize(gs, view) for gs in sets]
            rank = rank_regions(sets, global_set, view, pcfg, renders)
            buf = composite_buffers([renders[i] for i in rank.ordering], pcfg.beta, bg)
            log.info("view %d: ranking %s", vid, rank.ordering)
        elif kind == "naive":
            buf = rasterize(merged, view, bg)
        else:
            buf = rasterize(sets[0], view, bg)
        write_image(buf.color, out / f"{vid}.ppm")
        if args.buffers:
            write_sidecar(buf.depth, out / f"{vid}.depth.f32")
            write_sidecar(buf.normal, out / f"{vid}.normal.f32")
            write_sidecar(buf.accum_opacity, out / f"{vid}.opacity.f32")
    ws.write_stamp(out, train_hash=manifest.get("train_hash", "none"), views=",".join(map(str, ids)))
    ws.log_timing(f"render {name}", time.perf_counter() - t0)
    print(f"rendered {len(ids)} views to {out}")


# ---------------------------------------------------------------------------
# eval


def evaluate(ws, ids, modes, model):
    rows = []
    for mode in modes:
        d = ws.render_dir(mode)
        for vid in ids:
            p = d / f"{vid}.ppm"
            if not p.exists():
                raise WorkspaceError(f"missing render {p}; run `trajsplat render --mode {mode}`")
            img = read_image(p)
            gt = read_image(ws.images_dir / _image_name(model.view(vid)))
            rows.append((mode, vid, psnr(img, gt), ssim(img, gt)))
    return rows


def write_report(rows, modes, txt_path, csv_path):
    means = {}
    for mode in modes:
        sel = [r for r in rows if r[0] == mode]
        means[mode] = (float(np.mean([r[2] for r in sel])), float(np.mean([r[3] for r in sel])))
    delta = None
    if "progressive" in means and "naive" in means:
        delta = tuple(a - b for a, b in zip(means["progressive"], means["naive"]))

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "view", "psnr", "ssim"])
        for mode, vid, p, s in rows:
            w.writerow([mode, vid, f"{p:.6f}", f"{s:.6f}"])
        for mode, (p, s) in means.items():
            w.writerow([mode, "mean", f"{p:.6f}", f"{s:.6f}"])
        if delta is not None:
            w.writerow(["progressive-naive", "delta", f"{delta[0]:.6f}", f"{delta[1]:.6f}"])

    lines = [f"{'mode':<18} {'view':>6} {'PSNR':>10} {'SSIM':>8}"]
    for mode, vid, p, s in rows:
        lines.append(f"{mode:<18} {vid:>6} {p:>10.4f} {s:>8.4f}")
    for mode, (p, s) in means.items():
        lines.append(f"{mode:<18} {'mean':>6} {p:>10.4f} {s:>8.4f}")
    if delta is not None:
        lines.append(f"{'progressive-naive':<18} {'delta':>6} {delta[0]:>+10.4f} {delta[1]:>+8.4f}")
    text = "\n".join(lines) + "\n"
    Path(txt_path).write_text(text, encoding="utf-8")
    return text, means, delta


def cmd_eval(args):
    ws = Workspace(args.workspace)
    manifest = ws.manifest()
    model = ws.load_model()
    every = args.every if args.every is not None else int(manifest.get("holdout_every", 8))
    ids = parse_view_spec(args.views, model, every)
    if not ids:
        raise ValidationError("the test split is empty")
    modes = [m for m in args.modes.split(",") if m]
    t0 = time.perf_counter()
    rows = evaluate(ws, ids, modes, model)
    ws.reports_dir.mkdir(parents=True, exist_ok=True)
    text, _, _ = write_report(rows, modes, ws.reports_dir / "eval.txt", ws.reports_dir / "eval.csv")
    ws.log_timing("eval", time.perf_counter() - t0)
    print(text, end="")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="trajsplat", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic workspace")
    s.add_argument("config", help="key = value synthetic scene config")
    s.add_argument("out", help="workspace directory to create")
    s.add_argument("--force", action="store_true", help="overwrite a non-empty workspace")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("partition", help="split cameras and points into k regions")
    s.add_argument("workspace")
    s.add_argument("--k", type=int, required=True, help="number of regions")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", help="train a region, the coarse global set, or everything")
    s.add_argument("workspace")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--region", type=int, help="region index")
    g.add_argument("--global", dest="use_global", action="store_true", help="coarse global set")
    g.add_argument("--all", action="store_true", help="every region, then the global set")
    s.add_argument("--config", help="key = value training config")
    s.add_argument("--backend", choices=["cython", "python"], default=None)
    s.add_argument("--force", action="store_true", help="allow a config different from earlier runs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render views from trained sets")
    s.add_argument("workspace")
    s.add_argument("--mode", default="progressive", help="progressive | naive | region=<i>")
    s.add_argument("--views", default="test", help="test | all | comma separated view ids")
    s.add_argument("--beta", type=float, default=0.5, help="opacity budget for progressive mode")
    s.add_argument("--buffers", action="store_true", help="also write depth/normal/opacity sidecars")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM of renders against ground truth")
    s.add_argument("workspace")
    s.add_argument("--every", type=int, default=None, help="hold out every N-th view (default from manifest)")
    s.add_argument("--views", default="test", help="test | all | comma separated view ids")
    s.add_argument("--modes", default="progressive,naive", help="render directories to score")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
