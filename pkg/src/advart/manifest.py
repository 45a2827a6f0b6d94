"""JSON-lines dataset manifests.

One object per line::

    {"image": "images/scene_00000.png", "boxes": [{"cx": .5, "cy": .5, "w": .2, "h": .6, "class": 0}],
     "split": "train"}

Paths are relative to the manifest's directory and coordinates are normalized.
``split`` is optional; when absent every fifth scene (index 4, 9, ...) is
``val`` and the rest ``train``, matching :func:`advart.detector.synth_dataset`.
"""

from __future__ import annotations

import json
from pathlib import Path

from .detector import Scene
from .imaging import ImageError, load_image, save_image
from .patchops import BoundingBox, PatchError


class ManifestError(ValueError):
    pass


def write_dataset(scenes: list[Scene], out_dir) -> Path:
    """PNG per scene under ``images/`` plus ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in scenes:
        rel = f"images/{s.name}.png"
        save_image(s.image, out / rel)
        rec = {"image": rel, "boxes": [b.to_dict() for b in s.boxes], "split": s.split}
        lines.append(json.dumps(rec, sort_keys=True))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[Scene]:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    scenes = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "image" not in rec or not isinstance(rec.get("boxes"), list):
            raise ManifestError(f"{where}: expected an object with 'image' and a 'boxes' list")
        try:
            boxes = [BoundingBox.from_dict(b) for b in rec["boxes"]]
        except (KeyError, TypeError, ValueError, PatchError) as exc:
            raise ManifestError(f"{where}: bad box ({exc})") from None
        idx = len(scenes)
        split = rec.get("split", "val" if idx % 5 == 4 else "train")
        if split not in ("train", "val"):
            raise ManifestError(f"{where}: split must be 'train' or 'val', got {split!r}")
        try:
            img = load_image(path.parent / rec["image"])
        except ImageError as exc:
            raise ManifestError(f"{where}: {exc}") from None
        scenes.append(Scene(img, boxes, split, Path(rec["image"]).stem))
    if not scenes:
        raise ManifestError(f"{path}: manifest has no scenes")
    return scenes
