"""Evaluation metrics: Jaccard, recall-weighted F-score, and their mean.

Both metrics run on binary masks (probabilities are binarized strictly above
0.5). Precision and recall are pixel counts. Empty-mask conventions: when both
masks are empty the score is 1 (the model correctly predicted nothing); when
exactly one is empty, F is 0, and J is 0 by the plain formula.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = ["BETA2", "binarize", "jaccard_metric", "f_score_metric", "jf_metric"]

BETA2 = 0.3


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(probs) > threshold


def _as_bool_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes disagree: {p.shape} vs {g.shape}")
    return p, g


def jaccard_metric(pred, gt) -> float:
    """|intersection| / |union|; 1.0 when both masks are empty."""
    p, g = _as_bool_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def f_score_metric(pred, gt, beta2: float = BETA2) -> float:
    """(1+b2)*P*R / (b2*P + R) over pixel precision/recall."""
    p, g = _as_bool_pair(pred, gt)
    n_pred = int(p.sum())
    n_gt = int(g.sum())
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    tp = int(np.logical_and(p, g).sum())
    precision = tp / n_pred
    recall = tp / n_gt
    denom = beta2 * precision + recall
    if denom == 0:
        return 0.0
    return float((1.0 + beta2) * precision * recall / denom)


def jf_metric(pred, gt) -> float:
    return 0.5 * (jaccard_metric(pred, gt) + f_score_metric(pred, gt))
