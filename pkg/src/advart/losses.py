"""Detection, similarity and total-variation losses and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg

COSINE_EPS = 1e-8
TV_EPS = 1e-8


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 8.0
    gamma: float = 0.5
    sim_metric: str = "cosine"
    tv_reduction: str = "mean"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise LossError(f"loss weights must be >= 0, got {self}")
        if self.sim_metric not in SIMILARITY:
            raise LossError(f"sim_metric must be one of {sorted(SIMILARITY)}, got {self.sim_metric!r}")
        if self.tv_reduction not in ("sum", "mean"):
            raise LossError(f"tv_reduction must be 'sum' or 'mean', got {self.tv_reduction!r}")


@dataclass(frozen=True)
class LossBreakdown:
    det: float
    sim_raw: float
    sim_effective: float
    tv: float
    total: float


def detection_loss(attack_scores: tg.Tensor) -> tg.Tensor:
    """Mean over the batch of each image's strongest target-class score."""
    attack_scores = tg.as_tensor(attack_scores)
    if attack_scores.size == 0:
        raise LossError("detection_loss on an empty batch")
    return tg.mean(attack_scores)


def _check_pair(p: tg.Tensor, n: tg.Tensor):
    if p.shape != n.shape:
        raise LossError(f"similarity: shape mismatch {p.shape} vs {n.shape}")


def similarity_mse(p, n) -> tg.Tensor:
    p, n = tg.as_tensor(p), tg.as_tensor(n)
    _check_pair(p, n)
    return tg.mean(tg.square(tg.sub(p, n)))


def similarity_cosine(p, n) -> tg.Tensor:
    """Negated cosine similarity of the flattened images."""
    p, n = tg.as_tensor(p), tg.as_tensor(n)
    _check_pair(p, n)
    pn = float(np.linalg.norm(p.data))
    nn = float(np.linalg.norm(n.data))
    if pn <= COSINE_EPS or nn <= COSINE_EPS:
        raise LossError(f"cosine similarity undefined for near-zero norm (|P|={pn:.3g}, |N|={nn:.3g})")
    dot = tg.tsum(tg.mul(p, n))
    norms = tg.mul(tg.sqrt(tg.tsum(tg.square(p))), tg.sqrt(tg.tsum(tg.square(n))))
    return tg.scale(tg.div(dot, norms), -1.0)


SIMILARITY = {"mse": similarity_mse, "cosine": similarity_cosine}


def tv_loss(p, reduction: str = "sum") -> tg.Tensor:
    """Isotropic total variation of an (H, W[, C]) image, summed over channels.

    The last row/column has no forward neighbour; its missing difference is 0.
    ``reduction="mean"`` divides by the element count.
    """
    p = tg.as_tensor(p)
    if p.ndim < 2 or p.shape[0] < 2 or p.shape[1] < 2:
        raise LossError(f"tv_loss needs at least 2x2 spatially, got {p.shape}")
    rest = ((0, 0),) * (p.ndim - 2)
    dy = tg.pad(tg.sub(p[1:], p[:-1]), ((0, 1), (0, 0)) + rest)
    dx = tg.pad(tg.sub(p[:, 1:], p[:, :-1]), ((0, 0), (0, 1)) + rest)
    # the argument is >= TV_EPS, so the exact derivative is safe here
    terms = tg.sqrt(tg.add(tg.add(tg.square(dy), tg.square(dx)), TV_EPS), eps=0.0)
    return tg.mean(terms) if reduction == "mean" else tg.tsum(terms)


def total_loss(det, sim_raw, tv, weights: LossWeights) -> tuple[tg.Tensor, LossBreakdown]:
    """alpha*det + beta*sign(sim)*sim**2 + gamma*tv, returned with a float breakdown."""
    det, sim_raw, tv = tg.as_tensor(det), tg.as_tensor(sim_raw), tg.as_tensor(tv)
    for name, t in (("det", det), ("sim_raw", sim_raw), ("tv", tv)):
        if not np.all(np.isfinite(t.data)):
            raise LossError(f"non-finite {name} loss")
    sim_eff = tg.signed_square(sim_raw)
    total = tg.add(
        tg.add(tg.scale(det, weights.alpha), tg.scale(sim_eff, weights.beta)),
        tg.scale(tv, weights.gamma),
    )
    parts = LossBreakdown(
        det=det.item(),
        sim_raw=sim_raw.item(),
        sim_effective=sim_eff.item(),
        tv=tv.item(),
        total=total.item(),
    )
    return total, parts
