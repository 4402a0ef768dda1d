"""``svlf`` command line: gen | train | render | eval | bench.

Every command takes ``--config file.json``; values come from flags, then the
file, then built-in defaults. The resolved configuration is written to
``<out>/config.json`` so the run can be repeated with ``--config`` alone.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .dataset import SceneDataset, write_depth, write_png
from .metrics import evaluate_frame
from .octree import GridConfig
from .parallel import resolve_threads
from .rendering import render_image

log = logging.getLogger("svlf")

DEFAULTS = {
    "gen": {"seed": 0, "views": 30, "res": 64, "primitives": None, "radius": 1.6,
            "fov": 40.0, "split": None, "out": None},
    "train": {"data": None, "out": None, "seed": 0, "epochs": [100, 150, 50], "lr": 1e-3,
              "lr_ft": 2e-4, "res": 400, "grid": 128, "dilation": 1, "lambda_eta": 1.0,
              "lambda_tau": 0.01, "lambda_empty": 0.01, "lambda_alpha": 0.1, "val_every": 1},
    "render": {"ckpt": None, "data": None, "out": None, "split": "test", "frames": None,
               "res": None},
    "eval": {"ckpt": None, "data": None, "out": None, "split": "test", "figures": True},
    "bench": {"ckpt": None, "data": None, "out": None, "split": "test", "repeats": 1},
}
REQUIRED = {"gen": ["out"], "train": ["data", "out"], "render": ["ckpt", "data", "out"],
            "eval": ["ckpt", "data", "out"], "bench": ["ckpt", "data", "out"]}
SPLITS = ("train", "val", "test", "all")


class UsageError(Exception):
    pass


def _int_list(s: str, n: int | None = None) -> list[int]:
    try:
        v = [int(x) for x in str(s).split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")
    if n is not None and len(v) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated integers, got {s!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svlf", description="Sparse voxel light field toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False, data=False):
        sp.add_argument("--config", type=Path, help="JSON config; flags override it")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $SVLF_THREADS or 1)")
        if ckpt:
            sp.add_argument("--ckpt", help="checkpoint file (.svlf)")
        if data:
            sp.add_argument("--data", help="dataset directory")
        return sp

    g = common(sub.add_parser("gen", help="generate a procedural scene dataset"))
    g.add_argument("--seed", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--res", type=int, help="image width = height")
    g.add_argument("--primitives", type=int, help="number of primitives (default: random 3-6)")
    g.add_argument("--radius", type=float, help="camera distance from the scene center")
    g.add_argument("--fov", type=float, help="vertical field of view in degrees")
    g.add_argument("--split", type=lambda s: _int_list(s, 3), help="train,val,test counts")

    t = common(sub.add_parser("train", help="train a model"), data=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=lambda s: _int_list(s, 3), help="stage epochs e1,e2,e3")
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-ft", dest="lr_ft", type=float)
    t.add_argument("--res", type=int, help="training image size (clamped to the data)")
    t.add_argument("--grid", type=int, help="finest octree resolution")
    t.add_argument("--dilation", type=int)
    for name in ("eta", "tau", "empty", "alpha"):
        t.add_argument(f"--lambda-{name}", dest=f"lambda_{name}", type=float)
    t.add_argument("--val-every", dest="val_every", type=int)

    r = common(sub.add_parser("render", help="render frames from a checkpoint"), True, True)
    r.add_argument("--split", choices=SPLITS)
    r.add_argument("--frames", type=_int_list, help="frame indices (default: whole split)")
    r.add_argument("--res", type=int, help="override output size")

    e = common(sub.add_parser("eval", help="metrics on a split"), True, True)
    e.add_argument("--split", choices=SPLITS)
    e.add_argument("--no-figures", dest="figures", action="store_const", const=False)

    b = common(sub.add_parser("bench", help="render timing and query counts"), True, True)
    b.add_argument("--split", choices=SPLITS)
    b.add_argument("--repeats", type=int)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """flags > config file > defaults."""
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
        if file_cfg.get("command", command) != command:
            raise UsageError(f"config is for '{file_cfg['command']}', not '{command}'")
        unknown = set(file_cfg) - set(cfg) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update({k: v for k, v in file_cfg.items() if k != "command"})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k in REQUIRED[command]:
        if cfg.get(k) is None:
            raise UsageError(f"--{k} is required")
    if "seed" in cfg and not 0 <= int(cfg["seed"]) < 2**64:
        raise UsageError("seed must be an unsigned 64-bit integer")
    return cfg


def _echo_config(out: Path, command: str, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=1) + "\n")


def _load_data(path) -> SceneDataset:
    if not (Path(path) / "scene.json").is_file():
        raise UsageError(f"no dataset at {path}")
    return SceneDataset.load(path)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"no checkpoint at {path}")
    return load_checkpoint(path)


def _select(ds: SceneDataset, split: str, frames=None):
    """(index, frame) pairs; index is the position in the manifest."""
    items = [(i, f) for i, f in enumerate(ds.frames) if split == "all" or f.split == split]
    if frames is not None:
        n = len(ds.frames)
        bad = [i for i in frames if not 0 <= i < n]
        if bad:
            raise UsageError(f"frame indices out of range 0..{n - 1}: {bad}")
        items = [(i, ds.frames[i]) for i in frames]
    if not items:
        raise UsageError(f"no frames selected from split '{split}'")
    return items


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, threads: int) -> int:
    from .scenegen import (SceneError, default_split, generate_dataset, random_scene,
                           sample_hemisphere_cameras)

    if cfg["views"] < 1:
        raise UsageError("views must be ≥ 1")
    if cfg["res"] < 1:
        raise UsageError("res must be ≥ 1")
    try:
        split = tuple(cfg["split"]) if cfg["split"] is not None else default_split(cfg["views"])
        if sum(split) != cfg["views"] or min(split) < 0:
            raise UsageError("split counts must be non-negative and sum to views")
        scene = random_scene(cfg["seed"], cfg["primitives"])
    except SceneError as e:
        raise UsageError(str(e))
    cams = sample_hemisphere_cameras(cfg["views"], cfg["radius"], cfg["seed"], cfg["res"],
                                     cfg["fov"])
    out = Path(cfg["out"])
    _echo_config(out, "gen", cfg)
    generate_dataset(scene, cams, out, split)
    print(f"wrote {cfg['views']} views ({split[0]}/{split[1]}/{split[2]}) to {out}")
    return 0


def cmd_train(cfg: dict, threads: int) -> int:
    from .octree import OctreeError
    from .training import TrainConfig, TrainingError, train

    ds = _load_data(cfg["data"])
    try:
        grid = GridConfig(resolution=cfg["grid"], dilation=cfg["dilation"])
        tc = TrainConfig(
            epochs=tuple(cfg["epochs"]), lr=cfg["lr"], lr_ft=cfg["lr_ft"],
            lambda_eta=cfg["lambda_eta"], lambda_tau=cfg["lambda_tau"],
            lambda_empty=cfg["lambda_empty"], lambda_alpha=cfg["lambda_alpha"],
            image_size=cfg["res"], seed=cfg["seed"], val_every=cfg["val_every"],
        )
    except (OctreeError, TrainingError) as e:
        raise UsageError(str(e))
    out = Path(cfg["out"])
    _echo_config(out, "train", cfg)
    print("stage\tepoch\tloss\tval_psnr\twall_s", flush=True)
    res = train(tc, ds, grid, out, threads=threads,
                on_epoch=lambda rec: print(rec.line(), flush=True))
    for name, path in res.checkpoints.items():
        log.info("checkpoint %s: %s", name, path)
    return 0


def cmd_render(cfg: dict, threads: int) -> int:
    model = _load_ckpt(cfg["ckpt"])
    ds = _load_data(cfg["data"])
    items = _select(ds, cfg["split"], cfg["frames"])
    out = Path(cfg["out"])
    _echo_config(out, "render", cfg)
    size = cfg["res"]
    for i, f in items:
        fr = render_image(model, f.camera, size, size, threads=threads)
        write_png(out / f"rgb_{i:05d}.png", fr.rgb)
        write_png(out / f"alpha_{i:05d}.png", fr.alpha)
        write_depth(out / f"depth_{i:05d}.f32", fr.depth)
    print(f"rendered {len(items)} frames to {out}")
    return 0


METRIC_COLS = ("psnr", "ssim", "depth_rmse_e3", "depth_mae_e3")


def cmd_eval(cfg: dict, threads: int) -> int:
    from . import report

    model = _load_ckpt(cfg["ckpt"])
    ds = _load_data(cfg["data"])
    items = _select(ds, cfg["split"])
    out = Path(cfg["out"])
    _echo_config(out, "eval", cfg)
    rows = []
    for i, f in items:
        fr = render_image(model, f.camera, threads=threads)
        rep = evaluate_frame(fr.rgb, f.rgb, fr.depth, f.depth, f.mask)
        rows.append({"frame": f.name, **rep.as_row()})
        if cfg["figures"]:
            report.comparison_figure(out / f"compare_{i:05d}.png", f.rgb, fr.rgb, f.depth,
                                     fr.depth, f.mask, f"frame {f.name}: {rep.psnr:.2f} dB")
    table = np.array([[r[c] for c in METRIC_COLS] for r in rows])
    mean, std = table.mean(0), table.std(0)
    lines = ["frame\t" + "\t".join(METRIC_COLS)]
    lines += [r["frame"] + "\t" + "\t".join(f"{r[c]:.6f}" for c in METRIC_COLS) for r in rows]
    lines.append("mean\t" + "\t".join(f"{v:.6f}" for v in mean))
    lines.append("std\t" + "\t".join(f"{v:.6f}" for v in std))
    text = "\n".join(lines) + "\n"
    (out / "metrics.tsv").write_text(text)
    summary = {c: {"mean": float(m), "std": float(s)} for c, m, s in zip(METRIC_COLS, mean, std)}
    (out / "metrics.json").write_text(json.dumps(
        {"split": cfg["split"], "frames": rows, "summary": summary}, indent=1) + "\n")
    if cfg["figures"]:
        tlog = Path(cfg["ckpt"]).parent / "train.log"
        if tlog.is_file():
            report.training_curve(out / "training_curve.png", report.read_train_log(tlog))
    sys.stdout.write(text)
    return 0


def cmd_bench(cfg: dict, threads: int) -> int:
    from .octree import traverse_batch

    model = _load_ckpt(cfg["ckpt"])
    ds = _load_data(cfg["data"])
    items = _select(ds, cfg["split"])
    if cfg["repeats"] < 1:
        raise UsageError("repeats must be ≥ 1")
    out = Path(cfg["out"])
    _echo_config(out, "bench", cfg)
    times, n_rays, n_queries, n_trav, fg_q, n_fg = [], 0, 0, 0, 0, 0
    for _, f in items:
        for _ in range(cfg["repeats"]):
            t0 = time.perf_counter()
            fr = render_image(model, f.camera, threads=threads)
            times.append(time.perf_counter() - t0)
        o, d = f.camera.pixel_rays()
        n_trav += traverse_batch(model.octree, o, d).n_hits
        n_rays += fr.hits_per_ray.size
        n_queries += fr.n_queries
        m = f.mask.ravel()
        fg_q += int(fr.hits_per_ray[m].sum())
        n_fg += int(m.sum())
    ms = 1e3 * float(np.mean(times))
    res = {
        "frames": len(items),
        "ms_per_frame": ms,
        "rays_per_s": n_rays / float(np.sum(times)) * cfg["repeats"],
        "queries_per_ray": n_queries / max(n_rays, 1),
        "queries_per_fg_ray": fg_q / max(n_fg, 1),
        "decoder_queries": n_queries,
        "traversal_hits": n_trav,
        "queries_equal_traversal": bool(n_queries == n_trav),
        "threads": threads,
    }
    text = "\n".join(f"{k}\t{v}" for k, v in res.items()) + "\n"
    (out / "bench.tsv").write_text(text)
    (out / "bench.json").write_text(json.dumps(res, indent=1) + "\n")
    sys.stdout.write(text)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("threads must be ≥ 1")
        threads = resolve_threads(args.threads)
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg, threads)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"svlf {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # anything past validation is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"svlf {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
