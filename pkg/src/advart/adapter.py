"""Child-process contract for evaluating against detectors this package does not ship.

The command is run as ``<command...> <image_dir>``.  ``image_dir`` holds
``00000.png, 00001.png, ...``.  The child writes JSON lines to stdout in the
manifest schema, with a ``score`` on every box::

    {"image": "00000.png", "boxes": [{"cx": .5, "cy": .4, "w": .2, "h": .6, "class": 0, "score": 0.91}]}

Images with no detections may be omitted.  A non-zero exit status is an error.
External detectors are evaluation-only: they expose no gradients, so crafting
still needs a :class:`~advart.detector.GridDetector`.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import Detection
from .imaging import save_image
from .patchops import BoundingBox


class AdapterError(RuntimeError):
    pass


@dataclass
class ExternalDetector:
    command: list[str]
    num_classes: int = 2
    timeout: float = 600.0

    @classmethod
    def from_spec(cls, spec: str) -> "ExternalDetector":
        """``cmd:<shell-quoted command>``."""
        if not spec.startswith("cmd:"):
            raise AdapterError(f"external detector spec must start with 'cmd:', got {spec!r}")
        argv = shlex.split(spec[4:])
        if not argv:
            raise AdapterError("empty external detector command")
        return cls(argv)

    def detect_images(self, images: list[np.ndarray], conf: float, nms_iou: float) -> list[list[Detection]]:
        """Detections per image with score >= ``conf``; NMS is the child's business."""
        with tempfile.TemporaryDirectory(prefix="advart-ext-") as tmp:
            names = []
            for i, img in enumerate(images):
                name = f"{i:05d}.png"
                save_image(img, Path(tmp) / name)
                names.append(name)
            try:
                proc = subprocess.run(
                    self.command + [tmp], capture_output=True, text=True, timeout=self.timeout, check=False
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise AdapterError(f"external detector failed to run: {exc}") from None
        if proc.returncode != 0:
            tail = proc.stderr.strip().splitlines()[-1:] or [""]
            raise AdapterError(f"external detector exited with status {proc.returncode}: {tail[0]}")
        return self._parse(proc.stdout, names, conf)

    def _parse(self, text: str, names: list[str], conf: float) -> list[list[Detection]]:
        index = {n: i for i, n in enumerate(names)}
        out: list[list[Detection]] = [[] for _ in names]
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                i = index[rec["image"]]
                for b in rec["boxes"]:
                    score = float(b["score"])
                    box = BoundingBox.from_dict(b)
                    if score < conf:
                        continue
                    probs = np.zeros(max(self.num_classes, box.class_id + 1))
                    probs[box.class_id] = 1.0
                    out[i].append(Detection(box, score, probs))
            except (KeyError, TypeError, ValueError) as exc:
                raise AdapterError(f"external detector output line {lineno}: {exc!r}") from None
        for dets in out:
            dets.sort(key=lambda d: -d.score)
        return out
