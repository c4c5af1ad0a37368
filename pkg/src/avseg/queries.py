"""Audio queries: generation from audio frames and prototype-bank refinement.

A small set of learnable query vectors cross-attends to the projected log-mel
frames of one clip, producing per-clip "generated" queries. Refinement then
lets each query attend over the frozen prototype bank and folds the attended
prototype mixture back in through a gated residual and layer norm:

    A = softmax((Q Wq)(M Wk)^T / sqrt(d))
    Q' = LN(Q + gamma * A (M Wv))

The bank never receives gradient (its rows are constants); the projections
``Wk``/``Wv`` adapt instead. A ``QuerySet`` records which stage of this
pipeline produced it so downstream code can refuse stale inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .bank import PrototypeBank
from .errors import EmptyInputError, ParameterError
from .layers import (
    CrossBlockParams,
    LayerNormParams,
    LinearParams,
    ParamRegistry,
    apply_ln,
    cross_block,
    init_cross_block,
    init_layer_norm,
    linear,
    xavier,
)

__all__ = [
    "AudioFeatures",
    "QuerySet",
    "QueryGeneratorParams",
    "BankRefineParams",
    "project_audio",
    "generate_queries",
    "refine_with_bank",
    "init_query_generator",
    "init_bank_refine",
]


@dataclass
class AudioFeatures:
    """Projected log-mel frames for one clip, shape (frames, d)."""

    frames: DiffArray


@dataclass
class QuerySet:
    """Query vectors plus provenance within the query pipeline.

    ``stage`` walks generated -> refined -> projected. ``bank_attention`` is a
    detached copy of the prototype attention map, kept for inspection.
    """

    vectors: DiffArray  # (n, d)
    stage: str
    bank_attention: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


@dataclass
class QueryGeneratorParams:
    base: DiffArray  # (n_queries, d) learnable seed queries
    blocks: list[CrossBlockParams]


@dataclass
class BankRefineParams:
    wq: DiffArray  # (d, d)
    wk: DiffArray  # (d_bank, d)
    wv: DiffArray  # (d_bank, d)
    ln: LayerNormParams
    gamma: float


def init_query_generator(
    reg: ParamRegistry,
    rng: np.random.Generator,
    n_queries: int,
    d: int,
    n_blocks: int = 2,
    n_heads: int = 2,
    ff_ratio: int = 2,
    prefix: str = "queries.gen",
) -> QueryGeneratorParams:
    if n_queries < 1:
        raise ParameterError("need at least one query")
    base = reg.add(f"{prefix}.base", 0.5 * rng.standard_normal((n_queries, d)))
    blocks = [
        init_cross_block(reg, f"{prefix}.block{i}", rng, d, d, n_heads, ff_ratio)
        for i in range(n_blocks)
    ]
    return QueryGeneratorParams(base, blocks)


def init_bank_refine(
    reg: ParamRegistry,
    rng: np.random.Generator,
    d: int,
    d_bank: int,
    gamma: float = 1.0,
    prefix: str = "queries.refine",
) -> BankRefineParams:
    return BankRefineParams(
        wq=reg.add(f"{prefix}.wq", xavier(rng, d, d)),
        wk=reg.add(f"{prefix}.wk", xavier(rng, d_bank, d)),
        wv=reg.add(f"{prefix}.wv", xavier(rng, d_bank, d)),
        ln=init_layer_norm(reg, f"{prefix}.ln", d),
        gamma=float(gamma),
    )


def project_audio(logmel: np.ndarray, proj: LinearParams) -> AudioFeatures:
    """Lift raw log-mel frames (frames, n_mels) into model width."""
    frames = np.asarray(logmel, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInputError(f"need a non-empty (frames, n_mels) matrix, got {frames.shape}")
    return AudioFeatures(linear(ad.constant(frames), proj))


def generate_queries(feats: AudioFeatures, p: QueryGeneratorParams) -> QuerySet:
    """Condition the learnable base queries on one clip's audio frames."""
    if feats.frames.shape[0] == 0:
        raise EmptyInputError("audio features have zero frames")
    x = p.base
    for blk in p.blocks:
        x = cross_block(x, feats.frames, blk)
    return QuerySet(x, "generated")


def refine_with_bank(q: QuerySet, bank: PrototypeBank, p: BankRefineParams) -> QuerySet:
    """Anchor generated queries to the frozen prototype bank.

    One attention head over all bank rows; the bank enters as constants so no
    gradient ever reaches the stored prototypes.
    """
    if q.stage != "generated":
        raise ParameterError(f"refine_with_bank needs generated queries, got {q.stage!r}")
    if bank.size == 0:
        raise EmptyInputError("prototype bank is empty")
    d = q.vectors.shape[1]
    memory = ad.constant(bank.prototypes)  # frozen by construction
    keys = ad.matmul(memory, p.wk)
    values = ad.matmul(memory, p.wv)
    probe = ad.matmul(q.vectors, p.wq)
    scores = ad.mul(ad.matmul(probe, ad.transpose(keys)), 1.0 / np.sqrt(d))
    attention = ad.softmax_rows(scores)
    mixed = ad.matmul(attention, values)
    refined = apply_ln(ad.add(q.vectors, ad.mul(mixed, p.gamma)), p.ln)
    return QuerySet(refined, "refined", bank_attention=attention.values.copy())
