"""Contrastive branch: projection head and InfoNCE over clean/augmented pairs.

During training each clip is rendered twice, once clean and once through the
augmentation chain. Both land in refined query space, go through a small
projection head, and are unit-normalized. InfoNCE then pulls matching query
rows together (clean row i with augmented row i) while pushing apart the other
rows of the same pair:

    L = -(1/n) * sum_i log( exp(s_ii / tau) / sum_j exp(s_ij / tau) )

with s the cosine similarity matrix. This branch exists only at training time;
evaluation must never touch it (the call counters prove that).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import instrument
from .autodiff import DiffArray
from .errors import ParameterError, ShapeError
from .layers import LinearParams, ParamRegistry, init_linear, linear
from .queries import QuerySet

__all__ = [
    "ProjectionHeadParams",
    "init_projection_head",
    "project_normalize",
    "ContrastivePair",
    "info_nce",
    "paired_contrastive_loss",
]

DEFAULT_TAU = 0.07
_NORM_FLOOR = 1e-24


@dataclass
class ProjectionHeadParams:
    lin1: LinearParams
    lin2: LinearParams
    nonlinear: bool = True  # False gives a purely linear head (used in tests)


def init_projection_head(
    reg: ParamRegistry,
    rng: np.random.Generator,
    d: int,
    d_proj: int | None = None,
    nonlinear: bool = True,
    prefix: str = "contrast.head",
) -> ProjectionHeadParams:
    d_proj = max(2, d // 2) if d_proj is None else d_proj
    return ProjectionHeadParams(
        lin1=init_linear(reg, f"{prefix}.lin1", rng, d, d),
        lin2=init_linear(reg, f"{prefix}.lin2", rng, d, d_proj),
        nonlinear=nonlinear,
    )


def project_normalize(q: QuerySet, head: ProjectionHeadParams) -> QuerySet:
    """Map refined queries to the unit sphere of the contrastive space."""
    instrument.bump("projection_head")
    if q.stage != "refined":
        raise ParameterError(f"projection head needs refined queries, got {q.stage!r}")
    h = linear(q.vectors, head.lin1)
    if head.nonlinear:
        h = ad.gelu(h)
    z = linear(h, head.lin2)
    sq = ad.reduce_sum(ad.mul(z, z), axis=1, keepdims=True)
    unit = ad.div(z, ad.sqrt(ad.add(sq, _NORM_FLOOR)))
    return QuerySet(unit, "projected")


@dataclass
class ContrastivePair:
    """Unit-normalized projections of one clean/augmented rendering pair."""

    clean: DiffArray  # (n, p)
    augmented: DiffArray  # (n, p)
    tau: float = DEFAULT_TAU


def info_nce(pair: ContrastivePair, symmetric: bool = False) -> DiffArray:
    """InfoNCE loss; row i of clean matches row i of augmented.

    ``symmetric=True`` averages the clean->augmented and augmented->clean
    directions.
    """
    if pair.tau <= 0:
        raise ParameterError(f"temperature must be positive, got {pair.tau}")
    zc, za = pair.clean, pair.augmented
    if zc.shape != za.shape or zc.ndim != 2 or zc.shape[0] < 1:
        raise ShapeError(f"need matching (n, p) projections, got {zc.shape} and {za.shape}")

    loss = _one_direction(zc, za, pair.tau)
    if symmetric:
        loss = ad.mul(ad.add(loss, _one_direction(za, zc, pair.tau)), 0.5)
    return loss


def _one_direction(anchors: DiffArray, positives: DiffArray, tau: float) -> DiffArray:
    n = anchors.shape[0]
    scores = ad.mul(ad.matmul(anchors, ad.transpose(positives)), 1.0 / tau)
    lse = ad.logsumexp_rows(scores)  # (n, 1)
    diag = ad.reshape(ad.take_flat(scores, np.arange(n) * (n + 1)), (n, 1))
    return ad.mul(ad.reduce_sum(ad.add(lse, ad.mul(diag, -1.0))), 1.0 / n)


def paired_contrastive_loss(
    clean: QuerySet, augmented: QuerySet, tau: float = DEFAULT_TAU, symmetric: bool = False
) -> DiffArray:
    """InfoNCE over the projected query rows of one clean/augmented pair."""
    instrument.bump("contrastive_branch")
    for q, name in ((clean, "clean"), (augmented, "augmented")):
        if q.stage != "projected":
            raise ParameterError(f"{name} queries must be projected, got {q.stage!r}")
    return info_nce(ContrastivePair(clean.vectors, augmented.vectors, tau), symmetric=symmetric)
