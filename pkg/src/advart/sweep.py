"""Ablation sweeps: craft (or reuse) a patch per grid cell, evaluate, tabulate."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np

from .detector import PERSON, GridDetector
from .evaluation import EvalError, clean_truths, map_eval
from .imaging import resolve_artwork, ssim
from .losses import SIMILARITY, LossWeights
from .optimize import craft_patch
from .patchops import EOT_COMPONENTS, EOTConfig, init_patch

log = logging.getLogger(__name__)

GRID_KEYS = ("ratio", "sim_metric", "beta", "eot", "artwork", "eval_eot")
REPORT_FIELDS = GRID_KEYS + ("map", "asr", "ssim")
SUMMARY_VERSION = "advart-report v1"


class SweepError(ValueError):
    pass


def parse_eot(label: str) -> EOTConfig:
    """``all`` | ``none`` | ``+``-joined component names."""
    label = label.strip()
    if label == "all":
        return EOTConfig()
    if label == "none":
        return EOTConfig.none()
    names = [p for p in label.split("+") if p]
    bad = sorted(set(names) - set(EOT_COMPONENTS))
    if bad:
        raise SweepError(f"unknown EOT component(s) {', '.join(bad)}; use all, none or {'+'.join(EOT_COMPONENTS)}")
    return EOTConfig.from_components(names)


def _coerce(key: str, raw: str):
    if key == "ratio":
        v = float(raw)
        if not 0 < v <= 1:
            raise SweepError(f"ratio {raw} outside (0, 1]")
        return v
    if key == "beta":
        v = float(raw)
        if v < 0:
            raise SweepError(f"beta {raw} must be >= 0")
        return v
    if key == "sim_metric":
        if raw not in SIMILARITY:
            raise SweepError(f"sim_metric {raw!r} not in {sorted(SIMILARITY)}")
        return raw
    if key in ("eot", "eval_eot"):
        parse_eot(raw)
        return raw
    return raw  # artwork: resolved lazily


def parse_grid(specs: Iterable[str]) -> dict[str, list]:
    """``["ratio=0.1,0.2,0.3", "sim_metric=mse,cosine"]`` -> ordered dict of value lists."""
    grid: dict[str, list] = {}
    for spec in specs:
        key, sep, vals = spec.partition("=")
        key = key.strip()
        if not sep or not vals.strip():
            raise SweepError(f"grid entry {spec!r} is not key=v1,v2,...")
        if key not in GRID_KEYS:
            raise SweepError(f"unknown grid key {key!r}; valid: {', '.join(GRID_KEYS)}")
        if key in grid:
            raise SweepError(f"grid key {key!r} given twice")
        grid[key] = [_coerce(key, v.strip()) for v in vals.split(",")]
    return grid


def grid_cells(grid: dict[str, list]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass(frozen=True)
class SweepSettings:
    """Values used for any axis the grid does not vary."""

    ratio: float = 0.3
    sim_metric: str = "cosine"
    beta: float = 8.0
    eot: str = "all"
    artwork: str = "builtin:sunset"
    eval_eot: str = "none"
    alpha: float = 1.0
    gamma: float = 0.5
    patch_size: int = 32
    init: str = "from-target"
    iters: int = 500
    batch: int = 8
    lr: float = 0.03
    seed: int = 0


def run_sweep(
    model: GridDetector,
    train_scenes,
    eval_scenes,
    grid: dict[str, list],
    settings: SweepSettings = SweepSettings(),
    patch: np.ndarray | None = None,
    target_class: int = PERSON,
    progress: Callable[[int, int, dict], None] | None = None,
) -> list[dict]:
    """One row per grid cell (an empty grid gives an empty table).

    With ``patch`` given, nothing is crafted: only ``ratio`` and ``eval_eot``
    may vary and SSIM is reported against the cell's artwork only if the grid
    names one.  Otherwise each cell crafts a fresh patch from ``settings``.
    """
    if patch is not None:
        crafted = set(grid) - {"ratio", "eval_eot", "artwork"}
        if crafted:
            raise SweepError(f"with a fixed patch only ratio, eval_eot and artwork can vary, not {', '.join(sorted(crafted))}")
    if not grid:
        return []
    truths = clean_truths(model, eval_scenes, target_class)
    if sum(len(t) for t in truths) == 0:
        raise EvalError("detector finds no target objects on the evaluation scenes")
    cells = grid_cells(grid)
    rows = []
    for n, cell in enumerate(cells, start=1):
        s = replace(settings, **cell)
        if progress:
            progress(n, len(cells), cell)
        target = resolve_artwork(s.artwork) if (patch is None or "artwork" in grid) else None
        if patch is None:
            canvas = init_patch(target, s.patch_size, s.init, seed=s.seed)
            weights = LossWeights(s.alpha, s.beta, s.gamma, s.sim_metric)
            run = craft_patch(
                model, train_scenes, canvas, weights, parse_eot(s.eot),
                iters=s.iters, batch=s.batch, seed=s.seed, ratio=s.ratio, lr=s.lr,
                probe_every=0, target_class=target_class,
            )
            pix, tgt = run.canvas.pixels, run.canvas.target
        else:
            pix = patch
            tgt = None if target is None else init_patch(target, patch.shape[0]).target
        eval_eot = parse_eot(s.eval_eot)
        rep = map_eval(
            model, eval_scenes, pix, s.ratio, target_class,
            eot=None if not eval_eot.enabled() else eval_eot, seed=s.seed, truths=truths,
        )
        row = {k: getattr(s, k) for k in GRID_KEYS}
        row.update(map=rep.map, asr=rep.asr, ssim=ssim(pix, tgt) if tgt is not None else float("nan"))
        log.info("cell %d/%d %s -> map %.2f asr %.2f", n, len(cells), cell, rep.map, rep.asr)
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def write_report_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in REPORT_FIELDS])


def write_summary(rows: list[dict], path, extra: dict | None = None) -> None:
    """Versioned key=value text, one line per fact."""
    lines = [SUMMARY_VERSION, f"cells={len(rows)}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}={_fmt(v)}")
    for i, r in enumerate(rows):
        for k in REPORT_FIELDS:
            lines.append(f"cell.{i}.{k}={_fmt(r[k])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
