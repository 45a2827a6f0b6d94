"""mAP against the detector's own clean detections, and attack success rate.

Ground truth for every scene is what the frozen detector finds on the clean
image, so an absent patch scores exactly 100% mAP and 0% ASR.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorgrad as tg
from .detector import PERSON, GridDetector, decode
from .metrics import ap_from_detections, iou
from .patchops import IDENTITY, EOTConfig, patch_scene, sample_transform


class EvalError(RuntimeError):
    pass


@dataclass
class EvalReport:
    map: float
    pr_points: list[tuple[float, float]]
    asr: float
    clean_counts: list[int]
    patched_counts: list[int]
    ssim: float | None = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"map": self.map, "asr": self.asr, "truths": sum(self.clean_counts), "detections": sum(self.patched_counts)}
        if self.ssim is not None:
            out["ssim"] = self.ssim
        return out


def _run(model: GridDetector, images: list[np.ndarray], conf: float, nms_iou: float, batch: int = 32):
    if hasattr(model, "detect_images"):  # external detector adapter
        return model.detect_images(images, conf, nms_iou)
    out = []
    for i in range(0, len(images), batch):
        raw = model.forward(np.stack(images[i : i + batch]))
        out += decode(raw, model.config.anchor, conf, nms_iou)
    return out


def clean_truths(model: GridDetector, scenes, target_class: int = PERSON, conf: float = 0.5, nms_iou: float = 0.45):
    """Per-scene list of (box, score) the model detects on the clean images."""
    dets = _run(model, [s.image for s in scenes], conf, nms_iou)
    return [[(d.box, d.score) for d in ds if d.class_id == target_class] for ds in dets]


def attack_success_rate(matched: int, total: int) -> float:
    """Percent of ground-truth objects no longer detected."""
    if total == 0:
        raise EvalError("ASR undefined without ground-truth objects")
    return 100.0 * (1.0 - matched / total)


def patched_images(
    scenes,
    truths,
    patch: np.ndarray,
    ratio: float,
    eot: EOTConfig | None = None,
    seed: int = 0,
    opacity: float = 1.0,
) -> list[np.ndarray]:
    """Composite the patch onto each scene's ground-truth boxes (identity transform unless ``eot``)."""
    ptensor = tg.Tensor(patch)
    out = []
    for i, (scene, gt) in enumerate(zip(scenes, truths)):
        boxes = [b for b, _ in gt]
        if eot is None:
            params = [IDENTITY] * len(boxes)
        else:
            rng = np.random.default_rng([seed, i, 7919])
            params = [sample_transform(rng, eot) for _ in boxes]
        img = patch_scene(scene.image, ptensor, boxes, params, ratio, opacity)
        out.append(img.data)
    return out


def map_eval(
    model: GridDetector,
    scenes,
    patch: np.ndarray | None = None,
    ratio: float = 0.2,
    target_class: int = PERSON,
    eot: EOTConfig | None = None,
    seed: int = 0,
    opacity: float = 1.0,
    conf: float = 0.5,
    nms_iou: float = 0.45,
    truths=None,
) -> EvalReport:
    if not scenes:
        raise EvalError("map_eval on an empty scene list")
    if truths is None:
        truths = clean_truths(model, scenes, target_class, conf, nms_iou)
    gt_boxes = [[b for b, _ in t] for t in truths]
    n_truth = sum(len(g) for g in gt_boxes)
    if n_truth == 0:
        raise EvalError("detector finds no target objects on the clean scenes; is it trained?")
    self_ap, _, _ = ap_from_detections(truths, gt_boxes)
    if abs(self_ap - 1.0) > 1e-12:
        raise EvalError(f"internal consistency: clean detections score {100 * self_ap:.3f}% against themselves")

    if patch is None:
        cands = truths
    else:
        imgs = patched_images(scenes, truths, patch, ratio, eot, seed, opacity)
        dets = _run(model, imgs, conf, nms_iou)
        cands = [[(d.box, d.score) for d in ds if d.class_id == target_class] for ds in dets]

    ap, recall, precision = ap_from_detections(cands, gt_boxes)
    matched = sum(
        1 for gt, cs in zip(gt_boxes, cands) for g in gt if any(iou(g, c) >= 0.5 for c, _ in cs)
    )
    return EvalReport(
        map=100.0 * ap,
        pr_points=[(float(r), float(p)) for r, p in zip(recall, precision)],
        asr=attack_success_rate(matched, n_truth),
        clean_counts=[len(g) for g in gt_boxes],
        patched_counts=[len(c) for c in cands],
    )


def asr(model: GridDetector, scenes, patch: np.ndarray | None, **kw) -> float:
    return map_eval(model, scenes, patch, **kw).asr
