"""``advart`` command line: synth-data, train-detector, craft, eval, sweep, ssim."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import AdapterError, ExternalDetector
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .detector import (
    DetectorError,
    TrainingError,
    load_detector,
    save_detector,
    split,
    synth_dataset,
    train_toy_detector,
)
from .evaluation import EvalError, map_eval
from .imaging import ImageError, load_image, resize, resolve_artwork, save_image, ssim
from .losses import LossBreakdown, LossError
from .manifest import ManifestError, read_manifest, write_dataset
from .optimize import HISTORY_FIELDS, CraftError, craft_config, craft_patch, load_patch, resume_run, save_patch_state
from .patchops import PatchError, init_patch
from .sweep import SweepError, SweepSettings, parse_eot, parse_grid, run_sweep, write_report_csv, write_summary

log = logging.getLogger("advart")

# Everything the library raises on bad input or a failed run.
HANDLED = (
    AdapterError, ConfigError, CraftError, DetectorError, EvalError, ImageError, LossError,
    ManifestError, PatchError, SweepError, OSError,
)


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _scenes(data: str | None, seed: int, count: int = 200):
    return read_manifest(data) if data else synth_dataset(seed, count)


def _subset(scenes, which: str):
    if which == "all":
        return list(scenes)
    sub = split(scenes, which)
    if not sub:
        raise CliError(f"dataset has no '{which}' scenes")
    return sub


def _detector(spec: str):
    if spec.startswith("cmd:"):
        return ExternalDetector.from_spec(spec)
    if not Path(spec).is_file():
        raise CliError(f"detector checkpoint not found: {spec}")
    return load_detector(spec)


def _num(x: float) -> str:
    return repr(float(x))


def write_history(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([r["iteration"]] + [_num(r[k]) for k in HISTORY_FIELDS[1:-1]]
                       + ["" if r["map_probe"] == "" else _num(r["map_probe"])])


def read_history(path) -> tuple[list[LossBreakdown], dict[int, float]]:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"history not found: {path}")
    history, probes = [], {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_FIELDS:
            raise CliError(f"{path}: unexpected columns {reader.fieldnames}")
        for n, row in enumerate(reader, start=1):
            if int(row["iteration"]) != n:
                raise CliError(f"{path}: iteration {row['iteration']} out of sequence (expected {n})")
            history.append(LossBreakdown(*(float(row[k]) for k in HISTORY_FIELDS[1:-1])))
            if row["map_probe"]:
                probes[n] = float(row["map_probe"])
    return history, probes


def _write_curve(curve: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "loss", "val_map"))
        for r in curve:
            w.writerow((r["epoch"], _num(r["loss"]), "" if "val_map" not in r else _num(r["val_map"])))


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    if args.count < 1:
        raise CliError(f"--count must be >= 1, got {args.count}")
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise CliError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
        for old in sorted((out / "images").glob("*.png")):
            old.unlink()
    scenes = synth_dataset(args.seed, args.count)
    path = write_dataset(scenes, out)
    n_val = len(split(scenes, "val"))
    print(f"wrote {len(scenes)} scenes ({len(scenes) - n_val} train, {n_val} val) to {path}")
    return 0


def cmd_train_detector(args) -> int:
    from .plots import plot_curve

    scenes = read_manifest(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curve_path = Path(args.curve) if args.curve else out.with_name(out.stem + "_curve.csv")
    try:
        model, curve = train_toy_detector(
            scenes, epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed, min_map=args.min_map
        )
    except TrainingError as exc:
        _write_curve(exc.curve, curve_path)
        raise
    save_detector(model, out)
    _write_curve(curve, curve_path)
    plot_curve(curve, curve_path.with_suffix(".png"))
    print(f"val mAP: {curve[-1]['val_map']:.2f}")
    print(f"checkpoint: {out}")
    print(f"curve: {curve_path}")
    return 0


CRAFT_FLAGS = {
    "seed": "seed", "detector": "detector", "data": "data", "target": "target", "patch_size": "patch_size",
    "ratio": "ratio", "init": "init", "iters": "iters", "batch": "batch", "lr": "lr", "out": "out",
    "alpha": "weights.alpha", "beta": "weights.beta", "gamma": "weights.gamma", "sim_metric": "weights.sim_metric",
}


def _craft_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {key: getattr(args, flag) for flag, key in CRAFT_FLAGS.items()}
    if args.eot is not None:
        overrides["eot"] = asdict(parse_eot(args.eot))
    return apply_overrides(cfg, overrides)


def _comparable(cfg_dict: dict) -> dict:
    return {k: v for k, v in cfg_dict.items() if k != "iters"}


def cmd_craft(args) -> int:
    from .plots import plot_history, plot_pr

    cfg = _craft_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = _scenes(cfg.data, cfg.seed)
    train, val = _subset(scenes, "train"), _subset(scenes, "val")

    if cfg.detector == "toy" and args.resume and (out / "detector.bin").is_file():
        model = load_detector(out / "detector.bin")
    elif cfg.detector == "toy":
        log.info("training toy detector on %d scenes", len(scenes))
        model, curve = train_toy_detector(scenes, seed=cfg.seed)
        save_detector(model, out / "detector.bin")
        _write_curve(curve, out / "detector_curve.csv")
    elif cfg.detector.startswith("cmd:"):
        raise CliError("crafting needs gradients; external detectors can only be evaluated")
    else:
        model = _detector(cfg.detector)

    target = resolve_artwork(cfg.target) if cfg.target else None
    canvas = init_patch(target, cfg.patch_size, cfg.init, seed=cfg.seed)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    resume = None
    if args.resume:
        history, probes = read_history(out / "history.csv")
        resume = resume_run(out / "patch.bin", history, probes)
        now = craft_config(cfg.weights, cfg.eot, cfg.iters, cfg.batch, cfg.seed, cfg.ratio, cfg.lr)
        if _comparable(resume.config) != _comparable(now):
            raise CliError("config differs from the snapshot's; only iters may change on resume")
        resume.config["iters"] = cfg.iters
        log.info("resuming at iteration %d", resume.iteration)

    def snapshot(run) -> None:
        save_image(run.canvas.pixels, out / "patch.png")
        save_patch_state(run, out / "patch.bin")
        write_history(run.history_rows(), out / "history.csv")

    run = craft_patch(
        model, train, canvas, cfg.weights, cfg.eot,
        iters=cfg.iters, batch=cfg.batch, seed=cfg.seed, ratio=cfg.ratio, lr=cfg.lr,
        probe_scenes=val[:32] if cfg.probe_every else None, probe_every=cfg.probe_every,
        snapshot_every=cfg.snapshot_every, on_snapshot=snapshot, resume=resume,
    )
    snapshot(run)

    rep = map_eval(model, val, run.canvas.pixels, cfg.ratio)
    clean = map_eval(model, val)
    score = ssim(run.canvas.pixels, run.canvas.target) if run.canvas.target is not None else float("nan")
    rows = [
        {"split": "val", "patch": "none", "map": clean.map, "asr": clean.asr, "ssim": float("nan")},
        {"split": "val", "patch": "crafted", "map": rep.map, "asr": rep.asr, "ssim": score},
    ]
    _write_eval_csv(rows, out / "report.csv")
    plot_history(run.history_rows(), out / "history.png")
    plot_pr({"clean": clean.pr_points, "patched": rep.pr_points}, out / "pr.png")
    print(f"iterations: {run.iteration}")
    print(f"patched mAP: {rep.map:.2f}  ASR: {rep.asr:.2f}  SSIM: {score:.4f}")
    print(f"artifacts: {out}")
    return 0


def _write_eval_csv(rows: list[dict], path) -> None:
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["nan" if isinstance(r[c], float) and np.isnan(r[c]) else
                        (f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]) for c in cols])


def cmd_eval(args) -> int:
    from .plots import plot_pr

    model = _detector(args.detector)
    scenes = _subset(read_manifest(args.data), args.split)
    patch = load_patch(args.patch) if args.patch else None
    eot = parse_eot(args.eot)
    rep = map_eval(model, scenes, patch, args.ratio, eot=eot if eot.enabled() else None, seed=args.seed)
    score = float("nan")
    if patch is not None and args.target:
        tgt = resolve_artwork(args.target)
        score = ssim(patch, np.clip(resize(tgt, patch.shape[:2]), 0, 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = {"split": args.split, "patch": args.patch or "none", "ratio": args.ratio, "eot": args.eot,
           "map": rep.map, "asr": rep.asr, "ssim": score}
    _write_eval_csv([row], out / "report.csv")
    write_summary([], out / "summary.txt", {"map": rep.map, "asr": rep.asr, "ssim": score,
                                              "truths": sum(rep.clean_counts), "detections": sum(rep.patched_counts)})
    plot_pr({"patched" if patch is not None else "clean": rep.pr_points}, out / "pr.png")
    print(f"mAP: {rep.map:.2f}  ASR: {rep.asr:.2f}" + ("" if np.isnan(score) else f"  SSIM: {score:.4f}"))
    return 0


def cmd_sweep(args) -> int:
    from .plots import plot_sweep

    grid = parse_grid(args.grid)
    model = _detector(args.detector)
    scenes = read_manifest(args.data)
    patch = load_patch(args.patch) if args.patch else None
    if patch is None and isinstance(model, ExternalDetector):
        raise CliError("crafting needs gradients; pass --patch to sweep an external detector")
    settings = SweepSettings(iters=args.iters, batch=args.batch, seed=args.seed, patch_size=args.patch_size)
    train = _subset(scenes, "train")
    evals = _subset(scenes, args.split)

    def progress(n, total, cell):
        print(f"[{n}/{total}] {json.dumps(cell, sort_keys=True)}", file=sys.stderr)

    rows = run_sweep(model, train, evals, grid, settings, patch=patch, progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(rows, out / "sweep.csv")
    write_summary(rows, out / "summary.txt")
    if rows:
        plot_sweep(rows, list(grid), out / "sweep.png")
    else:
        print("empty grid: wrote a header-only table", file=sys.stderr)
    for r in rows:
        cell = " ".join(f"{k}={r[k]}" for k in grid)
        print(f"{cell}: mAP {r['map']:.2f} ASR {r['asr']:.2f} SSIM {r['ssim']:.4f}")
    return 0


def cmd_ssim(args) -> int:
    a = load_image(args.a)
    b = load_image(args.b)
    if a.shape != b.shape:
        if not args.resize:
            raise CliError(f"image shapes differ: {a.shape} vs {b.shape} (use --resize)")
        b = np.clip(resize(b, a.shape[:2]), 0, 1)
    print(f"{ssim(a, b):.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Usage errors carry the same "advart: error:" prefix as runtime errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"advart: error: {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advart", description="Naturalistic adversarial patches against object detectors.")
    p.add_argument("--version", action="version", version=f"advart {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-data", help="generate synthetic scenes + JSONL manifest")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="write into a non-empty directory")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-detector", help="train the toy grid detector")
    s.add_argument("--data", required=True, help="manifest.jsonl")
    s.add_argument("--epochs", type=int, default=80)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-map", type=float, default=90.0, help="fail below this val mAP (percent)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--curve", help="training-curve CSV (default: <out stem>_curve.csv)")
    s.set_defaults(func=cmd_train_detector)

    s = sub.add_parser("craft", help="optimise a patch (config file + flag overrides)")
    s.add_argument("--config", help="RunConfig JSON")
    s.add_argument("--resume", action="store_true", help="continue from <out>/patch.bin + history.csv")
    s.add_argument("--seed", type=int)
    s.add_argument("--detector", help="checkpoint path or 'toy'")
    s.add_argument("--data", help="manifest.jsonl (default: 200 synthetic scenes)")
    s.add_argument("--target", help="artwork image or builtin:<name>")
    s.add_argument("--patch-size", dest="patch_size", type=int)
    s.add_argument("--ratio", type=float)
    s.add_argument("--init")
    s.add_argument("--iters", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--sim-metric", dest="sim_metric")
    s.add_argument("--eot", help="all | none | component+component")
    s.add_argument("--out")
    s.set_defaults(func=cmd_craft)

    s = sub.add_parser("eval", help="mAP / ASR of a patch against clean detections")
    s.add_argument("--detector", required=True, help="checkpoint path or cmd:<command>")
    s.add_argument("--data", required=True)
    s.add_argument("--patch", help="patch .png/.ppm/.bin (omit for the clean baseline)")
    s.add_argument("--ratio", type=float, default=0.3)
    s.add_argument("--eot", default="none", help="eval-time transforms: all | none | a+b")
    s.add_argument("--split", choices=("all", "train", "val"), default="all")
    s.add_argument("--target", help="artwork for the SSIM column")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="ablation grid -> CSV + figure")
    s.add_argument("--detector", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--grid", action="append", default=[], help="key=v1,v2 (repeatable)")
    s.add_argument("--patch", help="evaluate this patch instead of crafting per cell")
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--patch-size", dest="patch_size", type=int, default=32)
    s.add_argument("--split", choices=("all", "train", "val"), default="val")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("ssim", help="SSIM between two images")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--resize", action="store_true", help="resample b to a's size first")
    s.set_defaults(func=cmd_ssim)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except (CliError, *HANDLED) as exc:
        print(f"advart: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
