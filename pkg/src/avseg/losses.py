"""Segmentation loss terms and their weighted combination.

All losses consume a :class:`MaskPair` (predicted probabilities as a
differentiable array, binary ground truth as plain numpy) and return a scalar
node. Two smoothing constants appear: ``EPS`` (1e-6) smooths the dice/IoU
ratios, ``LOG_EPS`` (1e-12) only floors the logs in ce/focal. Both are
exposed as parameters because a couple of algebraic identities only hold
exactly at ``eps=0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ParameterError, ShapeError

__all__ = [
    "EPS",
    "LOG_EPS",
    "LossWeights",
    "MaskPair",
    "ce_loss",
    "focal_loss",
    "dice_loss",
    "iou_loss",
    "loss_terms",
    "weighted_total",
    "total_loss",
]

EPS = 1e-6  # ratio smoothing for the soft dice/IoU terms
# floor inside log() only; it must sit far below any reachable probability,
# otherwise a saturated prediction (p << floor) loses its recovery gradient
# and an all-background collapse becomes permanent
LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the unified objective. Focal ships disabled."""

    ce: float = 1.0
    focal: float = 0.0
    dice: float = 1.0
    iou: float = 1.0
    contrast: float = 0.1

    def __post_init__(self):
        for name in ("ce", "focal", "dice", "iou", "contrast"):
            if getattr(self, name) < 0:
                raise ParameterError(f"loss weight {name} must be non-negative")
        if self.ce == 0 and self.focal == 0 and self.dice == 0 and self.iou == 0:
            raise ParameterError("at least one segmentation loss weight must be positive")


@dataclass
class MaskPair:
    """Predicted foreground probabilities against a binary ground truth."""

    pred_probs: DiffArray  # (H, W), values in [0, 1]
    gt: np.ndarray  # (H, W), values in {0, 1}

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64)
        if self.pred_probs.shape != self.gt.shape:
            raise ShapeError(
                f"prediction {self.pred_probs.shape} vs ground truth {self.gt.shape}"
            )
        if not np.isfinite(self.pred_probs.values).all():
            raise ParameterError("predicted probabilities contain non-finite values")
        if not np.all((self.gt == 0.0) | (self.gt == 1.0)):
            raise ParameterError("ground truth must be binary")

    @property
    def count(self) -> int:
        return self.gt.size


def ce_loss(mp: MaskPair, eps: float = LOG_EPS) -> DiffArray:
    """Binary cross-entropy: -(1/N) sum y*log(p+eps) + (1-y)*log(1-p+eps)."""
    p = mp.pred_probs
    y = ad.constant(mp.gt)
    pos = ad.mul(y, ad.log(ad.add(p, eps)))
    neg = ad.mul(ad.add(ad.mul(y, -1.0), 1.0), ad.log(ad.add(ad.mul(p, -1.0), 1.0 + eps)))
    return ad.mul(ad.reduce_sum(ad.add(pos, neg)), -1.0 / mp.count)


def focal_loss(
    mp: MaskPair, gamma: float = 2.0, alpha: float = 0.25, eps: float = LOG_EPS
) -> DiffArray:
    """Balanced focal loss; collapses to alpha-scaled CE at gamma=0."""
    if gamma < 0:
        raise ParameterError(f"gamma must be non-negative, got {gamma}")
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    p = mp.pred_probs
    y = ad.constant(mp.gt)
    one_minus_p = ad.add(ad.mul(p, -1.0), 1.0)
    pos = ad.mul(
        ad.mul(y, alpha),
        ad.mul(ad.powc(one_minus_p, gamma), ad.log(ad.add(p, eps))),
    )
    neg = ad.mul(
        ad.mul(ad.add(ad.mul(y, -1.0), 1.0), 1.0 - alpha),
        ad.mul(ad.powc(p, gamma), ad.log(ad.add(one_minus_p, eps))),
    )
    return ad.mul(ad.reduce_sum(ad.add(pos, neg)), -1.0 / mp.count)


def dice_loss(mp: MaskPair, eps: float = EPS) -> DiffArray:
    """Soft dice: 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)."""
    p = mp.pred_probs
    y = ad.constant(mp.gt)
    overlap = ad.reduce_sum(ad.mul(p, y))
    total = ad.add(ad.reduce_sum(p), float(mp.gt.sum()))
    ratio = ad.div(ad.add(ad.mul(overlap, 2.0), eps), ad.add(total, eps))
    return ad.add(ad.mul(ratio, -1.0), 1.0)


def iou_loss(mp: MaskPair, eps: float = EPS) -> DiffArray:
    """Soft IoU: 1 - (sum(p*y) + eps) / (sum(p) + sum(y) - sum(p*y) + eps)."""
    p = mp.pred_probs
    y = ad.constant(mp.gt)
    inter = ad.reduce_sum(ad.mul(p, y))
    union = ad.add(ad.add(ad.reduce_sum(p), float(mp.gt.sum())), ad.mul(inter, -1.0))
    ratio = ad.div(ad.add(inter, eps), ad.add(union, eps))
    return ad.add(ad.mul(ratio, -1.0), 1.0)


def loss_terms(
    mp: MaskPair,
    l_con: DiffArray | None,
    w: LossWeights,
    focal_gamma: float = 2.0,
    focal_alpha: float = 0.25,
) -> dict[str, DiffArray]:
    """Every term with a nonzero weight, unweighted; zero-weight terms are
    never evaluated (the contrastive branch relies on that)."""
    terms: dict[str, DiffArray] = {}
    if w.ce != 0:
        terms["ce"] = ce_loss(mp)
    if w.focal != 0:
        terms["focal"] = focal_loss(mp, focal_gamma, focal_alpha)
    if w.dice != 0:
        terms["dice"] = dice_loss(mp)
    if w.iou != 0:
        terms["iou"] = iou_loss(mp)
    if w.contrast != 0:
        if l_con is None:
            raise ParameterError("lambda_con > 0 but no contrastive loss was supplied")
        terms["contrast"] = l_con
    return terms


def weighted_total(terms: dict[str, DiffArray], w: LossWeights) -> DiffArray:
    """Weighted sum of already-built terms (linear in each by construction)."""
    weights = {"ce": w.ce, "focal": w.focal, "dice": w.dice, "iou": w.iou, "contrast": w.contrast}
    total: DiffArray | None = None
    for name, term in terms.items():
        piece = ad.mul(term, weights[name])
        total = piece if total is None else ad.add(total, piece)
    assert total is not None  # LossWeights guarantees a positive seg weight
    return total


def total_loss(mp: MaskPair, l_con: DiffArray | None, w: LossWeights) -> DiffArray:
    return weighted_total(loss_terms(mp, l_con, w), w)
