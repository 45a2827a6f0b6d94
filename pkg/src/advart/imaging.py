"""Image I/O, resampling, SSIM and a few built-in procedural artworks.

Images are (H, W, 3) float64 arrays with values in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class ImageError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt not in ("PNG", "PPM"):
                raise ImageError(f"{path}: unsupported format {fmt!r} (need 8-bit RGB PNG or PPM P6)")
            if mode != "RGB":
                raise ImageError(f"{path}: {fmt} image has mode {mode!r}; only 8-bit RGB without alpha is accepted")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ImageError(f"{path}: cannot read image ({exc})") from None
    return arr.astype(np.float64) / 255.0


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0,1] values to uint8 with round-half-up."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ImageError(f"pixel values outside [0, 1]: [{img.min():.4g}, {img.max():.4g}]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    data = to_bytes(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) image, got shape {data.shape}")
    try:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageError(f"{path}: cannot write image ({exc})") from None


def resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample on pixel centres; identity when the size is unchanged."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ho, wo = size
    if (ho, wo) == (h, w):
        return img.copy()
    ys = np.clip((np.arange(ho) + 0.5) * h / ho - 0.5, 0, h - 1)
    xs = np.clip((np.arange(wo) + 0.5) * w / wo - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


# ---------------------------------------------------------------------------
# SSIM


def _gauss_1d(n: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(n) - (n - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, len(k), axis=0)
    x = win @ k
    win = np.lib.stride_tricks.sliding_window_view(x, len(k), axis=1)
    return win @ k


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-channel images over fully-inside windows."""
    k = _gauss_1d()
    mu_a = _filter_valid(a, k)
    mu_b = _filter_valid(b, k)
    var_a = _filter_valid(a * a, k) - mu_a**2
    var_b = _filter_valid(b * b, k) - mu_b**2
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, data range 1), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImageError(f"ssim: size mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WIN:
        raise ImageError(f"ssim: images must be at least {SSIM_WIN}px on each side, got {a.shape[:2]}")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))


# ---------------------------------------------------------------------------
# built-in artworks


def _grid(size: int):
    y, x = np.mgrid[0:size, 0:size] / (size - 1)
    return x, y


def _sunset(size: int) -> np.ndarray:
    x, y = _grid(size)
    sky = np.stack([0.95 - 0.35 * y, 0.55 - 0.25 * y, 0.35 + 0.4 * y], axis=-1)
    sun = np.exp(-(((x - 0.5) ** 2 + (y - 0.62) ** 2) / 0.02))[..., None]
    img = sky * (1 - sun) + np.array([1.0, 0.9, 0.4]) * sun
    sea = (y > 0.7)[..., None]
    water = np.stack([0.15 + 0.1 * np.sin(40 * y) ** 2, 0.25 + 0.1 * x, 0.5 + 0.2 * y], axis=-1)
    return np.where(sea, water, img)


def _waves(size: int) -> np.ndarray:
    x, y = _grid(size)
    band = np.sin(6 * np.pi * (y + 0.12 * np.sin(4 * np.pi * x)))
    r = 0.5 + 0.35 * band
    g = 0.55 + 0.3 * np.cos(3 * np.pi * x)
    b = 0.6 - 0.3 * band * y
    return np.stack([r, g, b], axis=-1)


def _mosaic(size: int) -> np.ndarray:
    rng = np.random.default_rng(7)
    seeds = rng.random((9, 2))
    colors = 0.15 + 0.7 * rng.random((9, 3))
    x, y = _grid(size)
    d = (x[..., None] - seeds[:, 0]) ** 2 + (y[..., None] - seeds[:, 1]) ** 2
    w = np.exp(-d / 0.004)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ colors


def _sunflower(size: int) -> np.ndarray:
    x, y = _grid(size)
    dx, dy = x - 0.5, y - 0.5
    rad = np.hypot(dx, dy)
    ang = np.arctan2(dy, dx)
    petals = 0.5 + 0.5 * np.cos(12 * ang)
    core = rad < 0.14
    petal = (rad < 0.2 + 0.18 * petals) & ~core
    bg = np.stack([0.3 + 0.3 * y, 0.55 + 0.1 * x, 0.85 - 0.2 * y], axis=-1)
    img = np.where(petal[..., None], np.array([0.98, 0.78, 0.12]), bg)
    return np.where(core[..., None], np.array([0.35, 0.2, 0.08]), img)


ARTWORKS = {
    "sunset": _sunset,
    "waves": _waves,
    "mosaic": _mosaic,
    "sunflower": _sunflower,
}


def builtin_artwork(name: str, size: int = 64) -> np.ndarray:
    try:
        fn = ARTWORKS[name]
    except KeyError:
        raise ImageError(f"unknown built-in artwork {name!r}; choose from {sorted(ARTWORKS)}") from None
    return np.clip(fn(size), 0.0, 1.0)


def resolve_artwork(spec: str, size: int = 64) -> np.ndarray:
    """``builtin:<name>`` or a path to a PNG/PPM file."""
    if spec.startswith("builtin:"):
        return builtin_artwork(spec.split(":", 1)[1], size)
    return load_image(spec)
