"""Patch crafting: EOT placement, frozen-detector forward, weighted loss, Adam on pixels."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensorgrad as tg
from .adam import AdamState, NonFiniteGradient
from .detector import PERSON, GridDetector, extract_attack_scores
from .evaluation import clean_truths, map_eval
from .losses import SIMILARITY, LossBreakdown, LossWeights, detection_loss, total_loss, tv_loss
from .patchops import EOTConfig, PatchCanvas, patch_scene, sample_transform

log = logging.getLogger(__name__)

PATCH_MAGIC = b"ADVART-PATCH v1\n"
HISTORY_FIELDS = ("iteration", "det", "sim_raw", "sim_effective", "tv", "total", "map_probe")


class CraftError(RuntimeError):
    pass


def adam_step(state: AdamState, patch: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One Adam update of the patch pixels, clamped back into [0, 1]."""
    (new,) = state.step([patch], [grad])
    return np.clip(new, 0.0, 1.0)


@dataclass
class Plateau:
    """Halve the learning rate when a 50-iteration window's mean loss fails to improve."""

    patience: int = 50
    min_scale: float = 1 / 8
    best: float = float("inf")
    recent: list[float] = field(default_factory=list)

    def update(self, loss: float, opt: AdamState, base_lr: float) -> None:
        self.recent.append(loss)
        if len(self.recent) < self.patience:
            return
        m = float(np.mean(self.recent))
        self.recent = []
        if m < self.best:
            self.best = m
        else:
            opt.lr = max(opt.lr / 2, base_lr * self.min_scale)


@dataclass
class CraftRun:
    config: dict
    canvas: PatchCanvas
    history: list[LossBreakdown] = field(default_factory=list)
    probes: dict[int, float] = field(default_factory=dict)
    adam: AdamState = field(default_factory=AdamState)
    plateau: Plateau = field(default_factory=Plateau)

    @property
    def iteration(self) -> int:
        return len(self.history)

    def history_rows(self) -> list[dict]:
        rows = []
        for i, h in enumerate(self.history, start=1):
            row = {"iteration": i, **asdict(h), "map_probe": self.probes.get(i, "")}
            rows.append(row)
        return rows


def craft_config(weights: LossWeights, eot: EOTConfig, iters: int, batch: int, seed: int, ratio: float, lr: float) -> dict:
    """JSON-normalized settings stored with a run (and checked on resume)."""
    cfg = {"weights": asdict(weights), "eot": asdict(eot), "iters": iters, "batch": batch,
           "seed": seed, "ratio": ratio, "lr": lr}
    return json.loads(json.dumps(cfg))


def scene_batch(n_scenes: int, batch: int, seed: int, iteration: int) -> np.ndarray:
    rng = np.random.default_rng([seed, iteration])
    if batch >= n_scenes:
        return np.arange(n_scenes)
    return np.sort(rng.choice(n_scenes, size=batch, replace=False))


def batch_objective(
    model: GridDetector,
    scenes,
    idx,
    patch: tg.Tensor,
    target: np.ndarray | None,
    weights: LossWeights,
    eot: EOTConfig,
    ratio: float,
    seed: int,
    iteration: int,
    target_class: int = PERSON,
) -> tuple[tg.Tensor, LossBreakdown]:
    """Build the full differentiable loss for one iteration's batch."""
    if weights.alpha > 0:
        patched = []
        for j in idx:
            scene = scenes[j]
            boxes = [b for b in scene.boxes if b.class_id == target_class]
            rng = np.random.default_rng([seed, iteration, int(j)])
            params = [sample_transform(rng, eot) for _ in boxes]
            patched.append(patch_scene(scene.image, patch, boxes, params, ratio))
        raw = model.forward(tg.stack(patched))
        det = detection_loss(extract_attack_scores(raw, target_class))
    else:
        det = tg.Tensor(0.0)  # detector term switched off: skip the forward pass
    if weights.beta > 0 and target is not None:
        sim = SIMILARITY[weights.sim_metric](patch, target)
    else:
        sim = tg.Tensor(0.0)
    tv = tv_loss(patch, weights.tv_reduction) if weights.gamma > 0 else tg.Tensor(0.0)
    return total_loss(det, sim, tv, weights)


def craft_patch(
    model: GridDetector,
    scenes,
    canvas: PatchCanvas,
    weights: LossWeights = LossWeights(),
    eot: EOTConfig | None = None,
    iters: int = 1000,
    batch: int = 8,
    seed: int = 0,
    ratio: float = 0.3,
    lr: float = 0.03,
    probe_scenes=None,
    probe_every: int = 100,
    snapshot_every: int = 0,
    on_snapshot: Callable[[CraftRun], None] | None = None,
    resume: CraftRun | None = None,
    target_class: int = PERSON,
) -> CraftRun:
    """Optimise patch pixels against a frozen detector.

    Randomness is derived from (seed, iteration, scene index), so a resumed run
    continues exactly where the uninterrupted one would have been.
    """
    if not model.frozen:
        raise CraftError("detector must be frozen before crafting")
    if not scenes:
        raise CraftError("no scenes to craft on")
    if weights.beta > 0 and canvas.target is None:
        raise CraftError("beta > 0 needs a target artwork")
    eot = eot if eot is not None else EOTConfig()
    fp = model.fingerprint()

    if resume is not None:
        run = resume
    else:
        run = CraftRun(
            config=craft_config(weights, eot, iters, batch, seed, ratio, lr),
            canvas=PatchCanvas(canvas.pixels.copy(), canvas.target),
            adam=AdamState(lr=lr),
        )

    truths = clean_truths(model, probe_scenes, target_class) if probe_scenes else None

    for it in range(run.iteration + 1, iters + 1):
        idx = scene_batch(len(scenes), batch, seed, it)
        patch = run.canvas.leaf()
        total, parts = batch_objective(
            model, scenes, idx, patch, run.canvas.target, weights, eot, ratio, seed, it, target_class
        )
        tg.backward(total)
        try:
            run.canvas.pixels = adam_step(run.adam, run.canvas.pixels, patch.grad)
        except NonFiniteGradient as exc:
            raise CraftError(f"iteration {it}: {exc}") from None
        run.history.append(parts)
        run.plateau.update(parts.total, run.adam, lr)

        if truths is not None and probe_every and it % probe_every == 0:
            rep = map_eval(model, probe_scenes, run.canvas.pixels, ratio, target_class, truths=truths)
            run.probes[it] = rep.map
            log.info("iter %d total %.4f det %.4f map %.2f lr %.4g", it, parts.total, parts.det, rep.map, run.adam.lr)
        if snapshot_every and on_snapshot and it % snapshot_every == 0:
            on_snapshot(run)

    if model.fingerprint() != fp:
        raise CraftError("detector weights changed during crafting")
    return run


# ---------------------------------------------------------------------------
# persistence


def save_patch_state(run: CraftRun, path) -> None:
    """Raw float64 patch + optimiser state for exact resume (``ADVART-PATCH v1``)."""
    px = run.canvas.pixels
    has_target = run.canvas.target is not None
    m = run.adam.m[0] if run.adam.m else np.zeros_like(px)
    v = run.adam.v[0] if run.adam.v else np.zeros_like(px)
    header = {
        "shape": list(px.shape),
        "iteration": run.iteration,
        "has_target": has_target,
        "adam": {"lr": run.adam.lr, "step": run.adam.step_count, "beta1": run.adam.beta1,
                 "beta2": run.adam.beta2, "eps": run.adam.eps},
        "plateau": {"best": run.plateau.best if np.isfinite(run.plateau.best) else None,
                    "recent": run.plateau.recent},
        "config": run.config,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (px, m, v) + ((run.canvas.target,) if has_target else ()):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_patch_state(path) -> tuple[dict, np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    """Returns (header, pixels, adam m, adam v, target-or-None)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CraftError(f"{path}: cannot read patch state ({exc})") from None
    if not raw.startswith(PATCH_MAGIC):
        raise CraftError(f"{path}: not an ADVART-PATCH v1 file")
    try:
        off = len(PATCH_MAGIC)
        (hlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + hlen])
        off += hlen
        shape = tuple(header["shape"])
        n = int(np.prod(shape))
        arrays = []
        for _ in range(4 if header["has_target"] else 3):
            if off + 8 * n > len(raw):
                raise CraftError(f"{path}: truncated patch state")
            arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy())
            off += 8 * n
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CraftError(f"{path}: corrupt patch state header ({exc})") from None
    if off != len(raw):
        raise CraftError(f"{path}: size does not match its header")
    target = arrays[3] if header["has_target"] else None
    return header, arrays[0], arrays[1], arrays[2], target


def load_patch(path) -> np.ndarray:
    """Patch pixels from a ``.bin`` state file or a PNG/PPM image."""
    path = Path(path)
    if path.suffix == ".bin":
        return load_patch_state(path)[1]
    from .imaging import load_image

    return load_image(path)


def resume_run(path, history: list[LossBreakdown], probes: dict[int, float]) -> CraftRun:
    header, px, m, v, target = load_patch_state(path)
    if len(history) != header["iteration"]:
        raise CraftError(
            f"history has {len(history)} rows but the snapshot is at iteration {header['iteration']}"
        )
    a = header["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step_count=a["step"],
                     m=[m] if a["step"] else [], v=[v] if a["step"] else [])
    p = header["plateau"]
    plateau = Plateau(best=float("inf") if p["best"] is None else p["best"], recent=list(p["recent"]))
    return CraftRun(header["config"], PatchCanvas(px, target), list(history), dict(probes), adam, plateau)
