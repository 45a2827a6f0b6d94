"""Patch state, EOT sampling, placement onto boxes, photometric jitter, compositing.

Everything downstream of the patch pixels is built from :mod:`advart.tensorgrad`
ops, so gradients of any detector score reach the patch through placement,
jitter and compositing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .imaging import resize

MIN_PATCH_SIZE = 16
EOT_COMPONENTS = ("scale", "rotation", "noise", "contrast", "brightness")
INIT_MODES = ("from-target", "uniform-random", "gray")


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Box in normalized image coordinates (centre, width, height)."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise PatchError(f"box size must be in (0, 1], got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def intersects_image(self) -> bool:
        x0, y0, x1, y1 = self.corners()
        return x1 > 0 and y1 > 0 and x0 < 1 and y0 < 1

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "class": self.class_id}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["cx"]), float(d["cy"]), float(d["w"]), float(d["h"]), int(d.get("class", 0)))


@dataclass
class PatchCanvas:
    pixels: np.ndarray
    target: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def leaf(self) -> tg.Tensor:
        return tg.Tensor(self.pixels, requires_grad=True)


def init_patch(target: np.ndarray | None, size: int, mode: str = "from-target", seed: int = 0) -> PatchCanvas:
    if size < MIN_PATCH_SIZE:
        raise PatchError(f"patch size must be >= {MIN_PATCH_SIZE}, got {size}")
    tgt = None if target is None else np.clip(resize(target, (size, size)), 0.0, 1.0)
    if mode == "from-target":
        if tgt is None:
            raise PatchError("mode 'from-target' needs a target artwork")
        pixels = tgt.copy()
    elif mode == "uniform-random":
        pixels = np.random.default_rng(seed).uniform(0.0, 1.0, (size, size, 3))
    elif mode == "gray":
        pixels = np.full((size, size, 3), 0.5)
    else:
        raise PatchError(f"unknown init mode {mode!r}")
    return PatchCanvas(pixels, tgt)


@dataclass
class EOTConfig:
    scale: bool = True
    rotation: bool = True
    noise: bool = True
    contrast: bool = True
    brightness: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)
    max_angle: float = 20.0
    noise_amp: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)
    max_brightness: float = 0.1

    @classmethod
    def none(cls) -> "EOTConfig":
        return cls(**{k: False for k in EOT_COMPONENTS})

    @classmethod
    def from_components(cls, names) -> "EOTConfig":
        names = set(names)
        unknown = names - set(EOT_COMPONENTS)
        if unknown:
            raise PatchError(f"unknown EOT components {sorted(unknown)}; valid: {EOT_COMPONENTS}")
        return cls(**{k: k in names for k in EOT_COMPONENTS})

    def enabled(self) -> tuple[str, ...]:
        return tuple(k for k in EOT_COMPONENTS if getattr(self, k))

    def label(self) -> str:
        return "+".join(self.enabled()) or "none"


@dataclass(frozen=True)
class TransformParams:
    scale_jitter: float = 1.0
    angle: float = 0.0
    noise_seed: int = 0
    noise_amp: float = 0.0
    contrast: float = 1.0
    brightness: float = 0.0


IDENTITY = TransformParams()


def sample_transform(rng: np.random.Generator, cfg: EOTConfig) -> TransformParams:
    """Draw one transformation; disabled components keep their identity value.

    Draw order is fixed so a given generator state always yields the same params.
    """
    u = rng.uniform(0.0, 1.0, 5)
    seed = int(rng.integers(0, 2**63 - 1))
    lo, hi = cfg.scale_range
    clo, chi = cfg.contrast_range
    return TransformParams(
        scale_jitter=lo + (hi - lo) * u[0] if cfg.scale else 1.0,
        angle=cfg.max_angle * (2 * u[1] - 1) if cfg.rotation else 0.0,
        noise_seed=seed if cfg.noise else 0,
        noise_amp=cfg.noise_amp if cfg.noise else 0.0,
        contrast=clo + (chi - clo) * u[2] if cfg.contrast else 1.0,
        brightness=cfg.max_brightness * (2 * u[3] - 1) if cfg.brightness else 0.0,
    )


def patch_side(box: BoundingBox, image_hw: tuple[int, int], ratio: float) -> float:
    """Base on-image patch side in pixels: ratio * sqrt(box area in pixels)."""
    h, w = image_hw
    return ratio * math.sqrt(box.w * w * box.h * h)


def placement_affine(size: int, params: TransformParams, box: BoundingBox, image_hw, ratio: float) -> np.ndarray:
    """2x3 map from patch pixel coords to image pixel coords (pixel centres at integers)."""
    h, w = image_hw
    k = patch_side(box, image_hw, ratio) * params.scale_jitter / size
    th = math.radians(params.angle)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    lin = k * rot
    centre_img = np.array([box.cx * w - 0.5, box.cy * h - 0.5])
    centre_patch = np.full(2, (size - 1) / 2)
    return np.column_stack([lin, centre_img - lin @ centre_patch])


def place_patch(
    patch: tg.Tensor, params: TransformParams, box: BoundingBox, image_hw: tuple[int, int], ratio: float
) -> tuple[tg.Tensor, tg.Tensor]:
    """Warp the patch onto the box; returns (warped (H,W,3), mask (H,W,1))."""
    if not box.intersects_image():
        raise PatchError(f"box {box} does not intersect the image")
    h, w = image_hw
    size = patch.shape[0]
    aff = placement_affine(size, params, box, image_hw, ratio)

    # warp into the footprint's bounding window only, then zero-pad to full size
    ext = np.array([[-1.0, -1.0], [size, -1.0], [-1.0, size], [size, size]])
    pts = ext @ aff[:, :2].T + aff[:, 2]
    x0 = max(int(math.floor(pts[:, 0].min())) - 1, 0)
    y0 = max(int(math.floor(pts[:, 1].min())) - 1, 0)
    x1 = min(int(math.ceil(pts[:, 0].max())) + 2, w)
    y1 = min(int(math.ceil(pts[:, 1].max())) + 2, h)
    if x1 <= x0 or y1 <= y0:
        raise PatchError(f"patch for box {box} falls entirely outside the {w}x{h} image")
    local = aff.copy()
    local[:, 2] -= (x0, y0)
    win = (y1 - y0, x1 - x0)
    cover = footprint_coverage(local, size, win)
    if not np.any(cover > 0):
        raise PatchError(f"patch for box {box} falls entirely outside the {w}x{h} image")
    # replicate a 1-pixel border so samples near the footprint edge never fade
    # towards zero; the coverage mask alone decides the patch's extent
    padded = tg.concat([patch[:1], patch, patch[-1:]], axis=0)
    padded = tg.concat([padded[:, :1], padded, padded[:, -1:]], axis=1)
    shifted = local.copy()
    shifted[:, 2] -= local[:, :2] @ np.ones(2)
    warped_win = tg.bilinear_warp(padded, shifted, win)
    widths = ((y0, h - y1), (x0, w - x1))
    warped = tg.pad(warped_win, widths + ((0, 0),))
    mask = tg.Tensor(np.pad(cover, widths)[..., None])
    return warped, mask


COVERAGE_SUBSAMPLES = 8


def footprint_coverage(affine: np.ndarray, size: int, out_hw, k: int = COVERAGE_SUBSAMPLES) -> np.ndarray:
    """Fraction of each output pixel covered by the patch square [-0.5, size-0.5)^2.

    Estimated on a k x k sub-pixel grid; the mask is a constant of the
    placement, so it needs no gradient.
    """
    ho, wo = out_hw
    inv = np.linalg.inv(affine[:, :2])
    offs = (np.arange(k) + 0.5) / k - 0.5
    hits = np.zeros((ho, wo))
    vv, uu = np.mgrid[0:ho, 0:wo].astype(np.float64)
    for dy in offs:
        for dx in offs:
            du = uu + dx - affine[0, 2]
            dv = vv + dy - affine[1, 2]
            xs = inv[0, 0] * du + inv[0, 1] * dv
            ys = inv[1, 0] * du + inv[1, 1] * dv
            hits += (xs >= -0.5) & (xs < size - 0.5) & (ys >= -0.5) & (ys < size - 0.5)
    return hits / (k * k)


def color_jitter(warped: tg.Tensor, params: TransformParams, mask: tg.Tensor) -> tg.Tensor:
    """clamp(in * contrast + brightness + noise, 0, 1), offsets applied on the mask support only."""
    if params.contrast == 1.0 and params.brightness == 0.0 and params.noise_amp == 0.0:
        return warped
    support = (mask.data > 0).astype(np.float64)
    offset = np.broadcast_to(params.brightness * support, warped.shape)
    if params.noise_amp > 0:
        noise = np.random.default_rng(params.noise_seed).uniform(-params.noise_amp, params.noise_amp, warped.shape)
        offset = offset + noise * support
    out = tg.add(tg.scale(warped, params.contrast), offset)
    return tg.clamp(out, 0.0, 1.0)


def apply_patch(image, warped, mask) -> tg.Tensor:
    """I* = (1 - M) * I + M * P_warped."""
    image, warped, mask = tg.as_tensor(image), tg.as_tensor(warped), tg.as_tensor(mask)
    if image.shape[:2] != warped.shape[:2] or image.shape[:2] != mask.shape[:2]:
        raise PatchError(f"spatial dims differ: image {image.shape}, warped {warped.shape}, mask {mask.shape}")
    return tg.add(tg.mul(tg.sub(1.0, mask), image), tg.mul(mask, warped))


def patch_scene(
    image,
    patch: tg.Tensor,
    boxes,
    params,
    ratio: float,
    opacity: float = 1.0,
) -> tg.Tensor:
    """Composite the patch onto every box in turn; ``params`` holds one TransformParams per box."""
    out = tg.as_tensor(image)
    hw = out.shape[:2]
    for box, p in zip(boxes, params):
        warped, mask = place_patch(patch, p, box, hw, ratio)
        warped = color_jitter(warped, p, mask)
        if opacity != 1.0:
            mask = tg.scale(mask, opacity)
        out = apply_patch(out, warped, mask)
    return out
