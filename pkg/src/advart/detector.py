"""Victim detector: a small single-anchor grid detector, its training loop,
a procedural scene generator and the ``ADVART-DET v1`` checkpoint format.

Raw predictions have shape (N, G, G, 5 + C) with channels
``[tx, ty, tw, th, objectness logit, class logits...]``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .adam import AdamState
from .metrics import ap_from_detections, iou
from .patchops import BoundingBox

log = logging.getLogger(__name__)

PERSON = 0
CLASS_NAMES = ("person", "car")
DET_MAGIC = b"ADVART-DET v1\n"


class DetectorError(RuntimeError):
    pass


class TrainingError(DetectorError):
    def __init__(self, msg, curve):
        super().__init__(msg)
        self.curve = curve


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    image: np.ndarray
    boxes: list[BoundingBox]
    split: str = "train"
    name: str = ""

    def person_boxes(self) -> list[BoundingBox]:
        return [b for b in self.boxes if b.class_id == PERSON]


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    from .imaging import resize

    base = rng.uniform(0.2, 0.8, 3)
    coarse = rng.uniform(-0.18, 0.18, (5, 5, 3))
    fine = rng.uniform(-0.06, 0.06, (20, 20, 3))
    y, x = np.mgrid[0:h, 0:w]
    tilt = rng.uniform(-0.15, 0.15, 3) * (y / h)[..., None]
    img = base + resize(coarse, (h, w)) + resize(fine, (h, w)) + tilt
    # some clutter stripes
    for _ in range(rng.integers(0, 4)):
        c = np.clip(base + rng.uniform(-0.25, 0.25, 3), 0, 1)
        if rng.random() < 0.5:
            y0 = rng.integers(0, h - 4)
            img[y0 : y0 + rng.integers(2, 5)] = c
        else:
            x0 = rng.integers(0, w - 4)
            img[:, x0 : x0 + rng.integers(2, 5)] = c
    return np.clip(img, 0.0, 1.0)


def _separated_color(rng, region: np.ndarray, min_sep: float = 0.2) -> np.ndarray:
    ref = region.reshape(-1, 3).mean(axis=0)
    while True:
        c = rng.uniform(0.0, 1.0, 3)
        if np.max(np.abs(c - ref)) >= min_sep:
            return c


def _draw_person(img, rng, x0, y0, bw, bh):
    """Rounded torso+legs block with a head disc on top; returns box pixel extents."""
    h, w = img.shape[:2]
    head_r = bw * rng.uniform(0.28, 0.36)
    body_top = y0 + 2 * head_r
    total = (x0, y0, x0 + bw, y0 + bh)
    region = img[int(y0) : int(y0 + bh), int(x0) : int(x0 + bw)]
    color = _separated_color(rng, region)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    rad = bw * 0.25
    cx0, cx1 = x0 + rad, x0 + bw - rad
    cy0, cy1 = body_top + rad, y0 + bh - rad
    dx = np.maximum(np.maximum(cx0 - xx, xx - cx1), 0)
    dy = np.maximum(np.maximum(cy0 - yy, yy - cy1), 0)
    body = (dx**2 + dy**2 <= rad**2) & (xx >= x0) & (xx <= x0 + bw) & (yy >= body_top) & (yy <= y0 + bh)
    head = (xx - (x0 + bw / 2)) ** 2 + (yy - (y0 + head_r)) ** 2 <= head_r**2
    # slight shading so figures are not flat
    shade = 1.0 - 0.15 * ((yy - y0) / bh)
    fig = body | head
    img[fig] = np.clip(color * shade[fig][:, None], 0, 1)
    # leg gap
    gap_w = max(1.0, bw * 0.12)
    gap = (np.abs(xx - (x0 + bw / 2)) < gap_w / 2) & (yy > y0 + bh * 0.72) & (yy <= y0 + bh)
    img[gap] = region.reshape(-1, 3).mean(axis=0)
    return total


def _draw_car(img, rng, x0, y0, bw, bh):
    h, w = img.shape[:2]
    region = img[int(y0) : int(y0 + bh), int(x0) : int(x0 + bw)]
    color = _separated_color(rng, region)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    body = (xx >= x0) & (xx <= x0 + bw) & (yy >= y0 + bh * 0.35) & (yy <= y0 + bh * 0.8)
    cabin = (xx >= x0 + bw * 0.25) & (xx <= x0 + bw * 0.75) & (yy >= y0) & (yy <= y0 + bh * 0.4)
    img[body | cabin] = color
    wr = bh * 0.2
    for fx in (0.22, 0.78):
        wheel = (xx - (x0 + bw * fx)) ** 2 + (yy - (y0 + bh - wr)) ** 2 <= wr**2
        img[wheel] = 0.08


def synth_scene(rng: np.random.Generator, dims=(160, 160)) -> tuple[np.ndarray, list[BoundingBox]]:
    h, w = dims
    img = _background(rng, h, w)
    placed: list[tuple[float, float, float, float]] = []
    boxes: list[BoundingBox] = []

    def free(x0, y0, x1, y1):
        m = 3
        return all(x1 + m <= a or x0 >= c + m or y1 + m <= b or y0 >= d + m for a, b, c, d in placed)

    n_person = int(rng.integers(1, 4))
    want = [PERSON] * n_person + ([1] if rng.random() < 0.4 else [])
    for cls in want:
        for _ in range(60):
            if cls == PERSON:
                bh = rng.uniform(0.35, 0.65) * h
                bw = bh * rng.uniform(0.32, 0.42)
            else:
                bw = rng.uniform(0.3, 0.5) * w
                bh = bw * rng.uniform(0.4, 0.5)
            x0 = rng.uniform(1, w - bw - 1)
            y0 = rng.uniform(1, h - bh - 1)
            if free(x0, y0, x0 + bw, y0 + bh):
                break
        else:
            if cls == PERSON and not boxes:
                raise DetectorError("could not place a figure")  # pragma: no cover
            continue
        if cls == PERSON:
            _draw_person(img, rng, x0, y0, bw, bh)
        else:
            _draw_car(img, rng, x0, y0, bw, bh)
        placed.append((x0, y0, x0 + bw, y0 + bh))
        boxes.append(BoundingBox((x0 + bw / 2) / w, (y0 + bh / 2) / h, bw / w, bh / h, cls))
    return img, boxes


def synth_dataset(seed: int, count: int, dims=(160, 160), val_every: int = 5) -> list[Scene]:
    """Deterministic procedural scenes; every ``val_every``-th scene is tagged ``val``."""
    if count < 1:
        raise DetectorError(f"count must be >= 1, got {count}")
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        img, boxes = synth_scene(rng, dims)
        split = "val" if val_every and i % val_every == val_every - 1 else "train"
        scenes.append(Scene(img, boxes, split, f"scene_{i:05d}"))
    return scenes


def split(scenes, name: str) -> list[Scene]:
    return [s for s in scenes if s.split == name]


# ---------------------------------------------------------------------------
# model


@dataclass
class DetectorConfig:
    num_classes: int = 2
    input_size: int = 160
    channels: tuple[int, ...] = (16, 32, 64, 64)
    anchor: tuple[float, float] = (0.18, 0.5)

    @property
    def grid(self) -> int:
        return self.input_size // 2 ** len(self.channels)


@dataclass
class Detection:
    box: BoundingBox
    objectness: float
    class_probs: np.ndarray

    @property
    def class_id(self) -> int:
        return self.box.class_id

    @property
    def score(self) -> float:
        return self.objectness * float(self.class_probs[self.box.class_id])


@dataclass
class GridDetector:
    config: DetectorConfig = field(default_factory=DetectorConfig)
    weights: list[np.ndarray] = field(default_factory=list)
    frozen: bool = True

    @classmethod
    def init(cls, config: DetectorConfig | None = None, seed: int = 0) -> "GridDetector":
        config = config or DetectorConfig()
        rng = np.random.default_rng(seed)
        weights = []
        cin = 3
        for cout in config.channels:
            weights.append(rng.normal(0, math.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3)))
            weights.append(np.zeros(cout))
            cin = cout
        nout = 5 + config.num_classes
        weights.append(rng.normal(0, 0.01, (nout, cin, 3, 3)))
        head_b = np.zeros(nout)
        head_b[4] = -4.0  # objectness prior: most cells are empty
        weights.append(head_b)
        return cls(config, weights)

    def layer_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights) // 2):
            names += [f"conv{i}.weight", f"conv{i}.bias"]
        return names

    def forward(self, images, params: list[tg.Tensor] | None = None) -> tg.Tensor:
        """(N, H, W, 3) images in [0, 1] -> raw (N, G, G, 5 + C)."""
        x = tg.as_tensor(images)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 3):
            raise DetectorError(f"detector expects (N, {s}, {s}, 3) input, got {x.shape}")
        ws = params if params is not None else [tg.Tensor(w) for w in self.weights]
        x = tg.transpose(tg.sub(x, 0.5), (0, 3, 1, 2))
        n_hidden = len(self.config.channels)
        for i in range(n_hidden):
            x = tg.conv2d(x, ws[2 * i], stride=2, padding=1)
            x = tg.add(x, tg.reshape(ws[2 * i + 1], (1, -1, 1, 1)))
            x = tg.leaky_relu(x)
        x = tg.conv2d(x, ws[-2], stride=1, padding=1)
        x = tg.add(x, tg.reshape(ws[-1], (1, -1, 1, 1)))
        return tg.transpose(x, (0, 2, 3, 1))

    def fingerprint(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for w in self.weights:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.digest()


def extract_attack_scores(raw: tg.Tensor, target_class: int = PERSON) -> tg.Tensor:
    """Per image, max over cells of sigmoid(objectness) * softmax(classes)[target]."""
    c = raw.shape[-1] - 5
    if not 0 <= target_class < c:
        raise DetectorError(f"target_class {target_class} outside [0, {c})")
    obj = tg.sigmoid(raw[..., 4])
    cls = tg.softmax(raw[..., 5:], axis=-1)[..., target_class]
    prod = tg.mul(obj, cls)
    n = raw.shape[0]
    return tg.tmax(tg.reshape(prod, (n, -1)), axis=1)


def _np_sigmoid(x):
    return tg._sigmoid(np.asarray(x, dtype=np.float64))


def _np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cell_scores(raw: np.ndarray, target_class: int = PERSON) -> np.ndarray:
    """Pre-NMS per-cell scores (N, G, G) for one class."""
    raw = np.asarray(raw.data if isinstance(raw, tg.Tensor) else raw)
    return _np_sigmoid(raw[..., 4]) * _np_softmax(raw[..., 5:])[..., target_class]


def decode_boxes(raw: np.ndarray, anchor: tuple[float, float]) -> np.ndarray:
    """(N, G, G, 4) normalized (cx, cy, w, h)."""
    g = raw.shape[1]
    gy, gx = np.mgrid[0:g, 0:g]
    cx = (gx + _np_sigmoid(raw[..., 0])) / g
    cy = (gy + _np_sigmoid(raw[..., 1])) / g
    w = anchor[0] * np.exp(np.clip(raw[..., 2], -6, 3))
    h = anchor[1] * np.exp(np.clip(raw[..., 3], -6, 3))
    return np.stack([cx, cy, np.minimum(w, 1.0), np.minimum(h, 1.0)], axis=-1)


def nms(cands: list[tuple[BoundingBox, float, object]], iou_threshold: float) -> list:
    """Greedy NMS: highest score first, drop everything overlapping a kept box."""
    order = sorted(range(len(cands)), key=lambda i: -cands[i][1])
    kept = []
    for i in order:
        if all(iou(cands[i][0], cands[k][0]) <= iou_threshold for k in kept):
            kept.append(i)
    return [cands[i] for i in kept]


def decode(raw, anchor=(0.18, 0.5), conf_threshold: float = 0.5, nms_iou: float = 0.45) -> list[list[Detection]]:
    if not (0 < conf_threshold < 1 and 0 < nms_iou < 1):
        raise DetectorError("thresholds must lie in (0, 1)")
    raw = np.asarray(raw.data if isinstance(raw, tg.Tensor) else raw)
    boxes = decode_boxes(raw, anchor)
    obj = _np_sigmoid(raw[..., 4])
    probs = _np_softmax(raw[..., 5:])
    n_cls = probs.shape[-1]
    out = []
    for i in range(raw.shape[0]):
        dets = []
        for c in range(n_cls):
            score = obj[i] * probs[i, ..., c]
            cands = []
            for gy, gx in zip(*np.nonzero(score >= conf_threshold)):
                b = boxes[i, gy, gx]
                box = BoundingBox(float(b[0]), float(b[1]), float(b[2]), float(b[3]), c)
                det = Detection(box, float(obj[i, gy, gx]), probs[i, gy, gx].copy())
                cands.append((box, float(score[gy, gx]), det))
            dets += [d for _, _, d in nms(cands, nms_iou)]
        dets.sort(key=lambda d: -d.score)
        out.append(dets)
    return out


def detect(model: GridDetector, images: np.ndarray, batch: int = 32, **kw) -> list[list[Detection]]:
    out = []
    for i in range(0, len(images), batch):
        raw = model.forward(np.asarray(images[i : i + batch]))
        out += decode(raw, model.config.anchor, **kw)
    return out


# ---------------------------------------------------------------------------
# training


def random_texture(rng: np.random.Generator, side: int) -> np.ndarray:
    """Random non-adversarial print: smooth noise, stripes, checks or a flat colour."""
    from .imaging import resize

    kind = rng.integers(0, 5)
    if kind == 0:
        k = int(rng.integers(2, 7))
        return resize(rng.random((k, k, 3)), (side, side))
    yy, xx = np.mgrid[0:side, 0:side] / side
    c1, c2 = rng.random(3), rng.random(3)
    if kind == 1:
        th = rng.uniform(0, np.pi)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.5, 5) * (np.cos(th) * xx + np.sin(th) * yy))
    elif kind == 2:
        n = rng.integers(2, 6)
        t = ((np.floor(xx * n) + np.floor(yy * n)) % 2).astype(float)
    elif kind == 3:
        t = np.zeros((side, side))
    else:
        t = rng.random((side, side))
    return c1 * t[..., None] + c2 * (1 - t[..., None])


# Texture "prints" pasted over persons during training: side as a fraction of
# sqrt(box area), and per-box probability.
PRINT_SIDE = (0.05, 0.2)
PRINT_PROB = 0.5


def _paste_prints(img: np.ndarray, boxes: list[BoundingBox], rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    targets = [b for b in boxes if rng.random() < PRINT_PROB]
    if rng.random() < 0.3:
        targets.append(BoundingBox(rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), 0.3, 0.3, -1))
    if not targets:
        return img
    img = img.copy()
    for b in targets:
        side = int(round(rng.uniform(*PRINT_SIDE) * math.sqrt(b.w * w * b.h * h)))
        if side < 2:
            continue
        cx = (b.cx + rng.uniform(-0.15, 0.15) * b.w) * w
        cy = (b.cy + rng.uniform(-0.15, 0.15) * b.h) * h
        x0, y0 = int(round(cx - side / 2)), int(round(cy - side / 2))
        tex = random_texture(rng, side)
        sx0, sy0 = max(x0, 0), max(y0, 0)
        sx1, sy1 = min(x0 + side, w), min(y0 + side, h)
        if sx1 > sx0 and sy1 > sy0:
            img[sy0:sy1, sx0:sx1] = tex[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0]
    return img


def _augment(img: np.ndarray, boxes: list[BoundingBox], rng: np.random.Generator):
    """Flip, box-preserving translation, random prints, channel shuffle, photometric jitter."""
    h, w = img.shape[:2]
    if rng.random() < 0.5:
        img = img[:, ::-1]
        boxes = [BoundingBox(1.0 - b.cx, b.cy, b.w, b.h, b.class_id) for b in boxes]
    x0 = min(b.cx - b.w / 2 for b in boxes) * w
    x1 = max(b.cx + b.w / 2 for b in boxes) * w
    y0 = min(b.cy - b.h / 2 for b in boxes) * h
    y1 = max(b.cy + b.h / 2 for b in boxes) * h
    dx = int(rng.integers(-min(int(x0), 24), min(int(w - x1), 24) + 1))
    dy = int(rng.integers(-min(int(y0), 24), min(int(h - y1), 24) + 1))
    padded = np.pad(img, ((24, 24), (24, 24), (0, 0)), mode="reflect")
    img = padded[24 - dy : 24 - dy + h, 24 - dx : 24 - dx + w]
    boxes = [BoundingBox(b.cx + dx / w, b.cy + dy / h, b.w, b.h, b.class_id) for b in boxes]
    img = _paste_prints(img, [b for b in boxes if b.class_id == PERSON], rng)
    img = img[..., rng.permutation(3)]
    img = np.clip((img - 0.5) * rng.uniform(0.7, 1.3) + 0.5 + rng.uniform(-0.15, 0.15), 0.0, 1.0)
    return img, boxes


def _targets(box_lists, cfg: DetectorConfig):
    n, g, c = len(box_lists), cfg.grid, cfg.num_classes
    pos = np.zeros((n, g, g))
    cls = np.zeros((n, g, g, c))
    box = np.zeros((n, g, g, 4))
    for i, boxes in enumerate(box_lists):
        # larger boxes claim a shared cell
        for b in sorted(boxes, key=lambda b: b.w * b.h):
            gx = min(int(b.cx * g), g - 1)
            gy = min(int(b.cy * g), g - 1)
            pos[i, gy, gx] = 1.0
            cls[i, gy, gx] = 0.0
            cls[i, gy, gx, b.class_id] = 1.0
            box[i, gy, gx] = (b.cx * g - gx, b.cy * g - gy, math.log(b.w / cfg.anchor[0]), math.log(b.h / cfg.anchor[1]))
    return pos, cls, box


def detection_training_loss(raw: tg.Tensor, pos, cls, box, noobj: float = 0.25, coord: float = 5.0) -> tg.Tensor:
    n = raw.shape[0]
    logit = raw[..., 4]
    bce = tg.sub(tg.softplus(logit), tg.mul(logit, pos))
    obj_loss = tg.tsum(tg.mul(bce, pos + noobj * (1 - pos)))
    cls_loss = tg.scale(tg.tsum(tg.mul(tg.log_softmax(raw[..., 5:], axis=-1), cls * pos[..., None])), -1.0)
    pred_xy = tg.sigmoid(raw[..., 0:2])
    d_xy = tg.sub(pred_xy, box[..., 0:2])
    d_wh = tg.sub(raw[..., 2:4], box[..., 2:4])
    box_loss = tg.add(
        tg.tsum(tg.mul(tg.square(d_xy), pos[..., None])),
        tg.tsum(tg.mul(tg.square(d_wh), pos[..., None])),
    )
    total = tg.add(tg.add(obj_loss, cls_loss), tg.scale(box_loss, coord))
    return tg.scale(total, 1.0 / n)


def evaluate_against_labels(model: GridDetector, scenes, cls: int = PERSON) -> float:
    """AP (percent) of the model's detections vs the annotated boxes of one class."""
    dets = detect(model, np.stack([s.image for s in scenes]))
    found = [[(d.box, d.score) for d in ds if d.class_id == cls] for ds in dets]
    truths = [[b for b in s.boxes if b.class_id == cls] for s in scenes]
    ap, _, _ = ap_from_detections(found, truths)
    return 100.0 * ap


def train_toy_detector(
    scenes,
    epochs: int = 80,
    lr: float = 3e-3,
    batch: int = 16,
    seed: int = 0,
    config: DetectorConfig | None = None,
    min_map: float = 90.0,
    callback=None,
) -> tuple[GridDetector, list[dict]]:
    """Train on the ``train`` split, report AP on ``val``; returns (frozen model, curve)."""
    train = split(scenes, "train")
    val = split(scenes, "val")
    if not train or not val:
        raise DetectorError("dataset needs both train and val scenes")
    model = GridDetector.init(config, seed)
    cfg = model.config
    model.frozen = False
    rng = np.random.default_rng(seed)
    opt = AdamState(lr=lr)
    curve = []
    for epoch in range(1, epochs + 1):
        if epoch == int(epochs * 0.75) + 1:
            opt.lr = lr * 0.2
        order = rng.permutation(len(train))
        tot, seen = 0.0, 0
        for k in range(0, len(order), batch):
            idx = order[k : k + batch]
            pairs = [_augment(train[i].image, train[i].boxes, rng) for i in idx]
            x = np.stack([p[0] for p in pairs])
            pos, cls, box = _targets([p[1] for p in pairs], cfg)
            params = [tg.Tensor(w, requires_grad=True) for w in model.weights]
            raw = model.forward(x, params)
            loss = detection_training_loss(raw, pos, cls, box)
            tg.backward(loss)
            model.weights = opt.step(model.weights, [p.grad for p in params])
            tot += loss.item() * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "loss": tot / seen}
        if epoch % 5 == 0 or epoch == epochs:
            row["val_map"] = evaluate_against_labels(model, val)
        curve.append(row)
        log.info("epoch %d loss %.4f %s", epoch, row["loss"], row.get("val_map", ""))
        if callback:
            callback(row)
    model.frozen = True
    final = curve[-1]["val_map"]
    if final < min_map:
        raise TrainingError(f"toy detector reached only {final:.1f} val mAP (< {min_map})", curve)
    return model, curve


# ---------------------------------------------------------------------------
# checkpoint


def save_detector(model: GridDetector, path) -> None:
    header = {
        "config": asdict(model.config),
        "layers": [{"name": n, "shape": list(w.shape)} for n, w in zip(model.layer_names(), model.weights)],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DET_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for w in model.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_detector(path) -> GridDetector:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DetectorError(f"{path}: cannot read detector checkpoint ({exc})") from None
    if not raw.startswith(DET_MAGIC):
        raise DetectorError(f"{path}: not an ADVART-DET v1 checkpoint")
    try:
        off = len(DET_MAGIC)
        (hlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + hlen])
        off += hlen
        cfgd = header["config"]
        cfg = DetectorConfig(
            num_classes=cfgd["num_classes"],
            input_size=cfgd["input_size"],
            channels=tuple(cfgd["channels"]),
            anchor=tuple(cfgd["anchor"]),
        )
        weights = []
        for layer in header["layers"]:
            n = int(np.prod(layer["shape"]))
            if off + 8 * n > len(raw):
                raise DetectorError(f"{path}: truncated checkpoint (missing weight bytes)")
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(layer["shape"]).astype(np.float64)
            off += 8 * n
            weights.append(arr)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise DetectorError(f"{path}: corrupt checkpoint header ({exc})") from None
    if off != len(raw):
        raise DetectorError(f"{path}: trailing or missing weight bytes")
    return GridDetector(cfg, weights, frozen=True)
