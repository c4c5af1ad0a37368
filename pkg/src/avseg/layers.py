"""Parameter registry and transformer building blocks.

Model parameters live in a flat name -> DiffArray registry (names are
dot-paths like ``backbone.stage2.block0.attn.head1.wq``), which is what the
optimizer and the checkpoint format iterate over. The dataclasses below hold
references to the same DiffArray objects in structured form for the forward
passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ParameterError, ShapeError

__all__ = [
    "ParamRegistry",
    "xavier",
    "LinearParams",
    "linear",
    "init_linear",
    "LayerNormParams",
    "apply_ln",
    "init_layer_norm",
    "AttentionParams",
    "multihead_attention",
    "init_attention",
    "FeedForwardParams",
    "feed_forward",
    "init_feed_forward",
    "TransformerBlockParams",
    "transformer_block",
    "init_transformer_block",
    "CrossBlockParams",
    "cross_block",
    "init_cross_block",
]

LN_EPS = 1e-5


class ParamRegistry:
    """Ordered, name-unique store of trainable DiffArrays."""

    def __init__(self):
        self._params: dict[str, DiffArray] = {}

    def add(self, name: str, values: np.ndarray) -> DiffArray:
        if name in self._params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        p = ad.parameter(values)
        self._params[name] = p
        return p

    def get(self, name: str) -> DiffArray:
        return self._params[name]

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def total_size(self) -> int:
        return sum(p.size for p in self._params.values())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return scale * rng.standard_normal((fan_in, fan_out))


@dataclass
class LinearParams:
    w: DiffArray
    b: DiffArray | None = None


def init_linear(reg: ParamRegistry, prefix: str, rng, d_in: int, d_out: int, bias: bool = True) -> LinearParams:
    w = reg.add(f"{prefix}.w", xavier(rng, d_in, d_out))
    b = reg.add(f"{prefix}.b", np.zeros(d_out)) if bias else None
    return LinearParams(w, b)


def linear(x: DiffArray, p: LinearParams) -> DiffArray:
    out = ad.matmul(x, p.w)
    if p.b is not None:
        out = ad.add(out, ad.reshape(p.b, (1, p.b.size)))
    return out


@dataclass
class LayerNormParams:
    gain: DiffArray
    bias: DiffArray


def init_layer_norm(reg: ParamRegistry, prefix: str, d: int) -> LayerNormParams:
    return LayerNormParams(reg.add(f"{prefix}.gain", np.ones(d)), reg.add(f"{prefix}.bias", np.zeros(d)))


def apply_ln(x: DiffArray, p: LayerNormParams) -> DiffArray:
    return ad.layer_norm(x, p.gain, p.bias, eps=LN_EPS)


@dataclass
class AttentionParams:
    heads: list[tuple[DiffArray, DiffArray, DiffArray]]  # (wq, wk, wv) per head
    out: LinearParams


def init_attention(
    reg: ParamRegistry,
    prefix: str,
    rng,
    d_q: int,
    d_kv: int,
    d_model: int,
    n_heads: int,
) -> AttentionParams:
    if d_model % n_heads != 0:
        raise ParameterError(f"width {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    heads = []
    for h in range(n_heads):
        wq = reg.add(f"{prefix}.head{h}.wq", xavier(rng, d_q, d_head))
        wk = reg.add(f"{prefix}.head{h}.wk", xavier(rng, d_kv, d_head))
        wv = reg.add(f"{prefix}.head{h}.wv", xavier(rng, d_kv, d_head))
        heads.append((wq, wk, wv))
    out = init_linear(reg, f"{prefix}.out", rng, d_model, d_model)
    return AttentionParams(heads, out)


def multihead_attention(q_in: DiffArray, kv_in: DiffArray, p: AttentionParams) -> DiffArray:
    """Standard multi-head attention; self-attention when q_in is kv_in."""
    if q_in.ndim != 2 or kv_in.ndim != 2:
        raise ShapeError("attention inputs must be 2-D (tokens, width)")
    parts = []
    for wq, wk, wv in p.heads:
        q = ad.matmul(q_in, wq)
        k = ad.matmul(kv_in, wk)
        v = ad.matmul(kv_in, wv)
        parts.append(ad.scaled_dot_attention(q, k, v))
    merged = parts[0] if len(parts) == 1 else ad.concat_cols(parts)
    return linear(merged, p.out)


@dataclass
class FeedForwardParams:
    lin1: LinearParams
    lin2: LinearParams


def init_feed_forward(reg: ParamRegistry, prefix: str, rng, d: int, ratio: int = 2) -> FeedForwardParams:
    hidden = max(2, ratio * d)
    return FeedForwardParams(
        init_linear(reg, f"{prefix}.lin1", rng, d, hidden),
        init_linear(reg, f"{prefix}.lin2", rng, hidden, d),
    )


def feed_forward(x: DiffArray, p: FeedForwardParams) -> DiffArray:
    return linear(ad.gelu(linear(x, p.lin1)), p.lin2)


@dataclass
class TransformerBlockParams:
    attn: AttentionParams
    ln1: LayerNormParams
    ff: FeedForwardParams
    ln2: LayerNormParams


def init_transformer_block(
    reg: ParamRegistry, prefix: str, rng, d: int, n_heads: int, ff_ratio: int = 2
) -> TransformerBlockParams:
    return TransformerBlockParams(
        attn=init_attention(reg, f"{prefix}.attn", rng, d, d, d, n_heads),
        ln1=init_layer_norm(reg, f"{prefix}.ln1", d),
        ff=init_feed_forward(reg, f"{prefix}.ff", rng, d, ff_ratio),
        ln2=init_layer_norm(reg, f"{prefix}.ln2", d),
    )


def transformer_block(x: DiffArray, p: TransformerBlockParams) -> DiffArray:
    """Pre-norm residual block: x + SelfAttn(LN(x)), then x + FF(LN(x)).

    The identity path is never normalized, so positional variation present in
    the embedding survives an arbitrarily deep stack; post-norm variants were
    measured to contract all tokens toward a common direction at init, which
    starves the mask decoder of spatial signal.
    """
    h = apply_ln(x, p.ln1)
    x = ad.add(x, multihead_attention(h, h, p.attn))
    return ad.add(x, feed_forward(apply_ln(x, p.ln2), p.ff))


@dataclass
class CrossBlockParams:
    attn: AttentionParams
    ln1: LayerNormParams
    ff: FeedForwardParams
    ln2: LayerNormParams


def init_cross_block(
    reg: ParamRegistry, prefix: str, rng, d: int, d_kv: int, n_heads: int, ff_ratio: int = 2
) -> CrossBlockParams:
    return CrossBlockParams(
        attn=init_attention(reg, f"{prefix}.attn", rng, d, d_kv, d, n_heads),
        ln1=init_layer_norm(reg, f"{prefix}.ln1", d),
        ff=init_feed_forward(reg, f"{prefix}.ff", rng, d, ff_ratio),
        ln2=init_layer_norm(reg, f"{prefix}.ln2", d),
    )


def cross_block(x: DiffArray, kv: DiffArray, p: CrossBlockParams) -> DiffArray:
    """Like ``transformer_block`` but the attention reads from ``kv``."""
    x = ad.add(x, multihead_attention(apply_ln(x, p.ln1), kv, p.attn))
    return ad.add(x, feed_forward(apply_ln(x, p.ln2), p.ff))
