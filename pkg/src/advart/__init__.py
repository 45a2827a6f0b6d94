"""AdvART-style naturalistic adversarial patches on a from-scratch numpy stack.

Modules: ``tensorgrad`` (reverse-mode autodiff), ``imaging`` (I/O, SSIM,
artworks), ``patchops`` (EOT placement and compositing), ``losses``,
``detector`` (toy grid detector + synthetic scenes), ``optimize`` (crafting),
``evaluation``/``sweep`` (mAP, ASR, ablations) and ``cli``.
"""

__version__ = "0.1.0"

from .detector import GridDetector, load_detector, save_detector, synth_dataset, train_toy_detector
from .evaluation import EvalReport, map_eval
from .imaging import builtin_artwork, load_image, save_image, ssim
from .losses import LossWeights
from .optimize import craft_patch
from .patchops import BoundingBox, EOTConfig, PatchCanvas, init_patch

__all__ = [
    "BoundingBox", "EOTConfig", "EvalReport", "GridDetector", "LossWeights", "PatchCanvas",
    "builtin_artwork", "craft_patch", "init_patch", "load_detector", "load_image", "map_eval",
    "save_detector", "save_image", "ssim", "synth_dataset", "train_toy_detector",
]
