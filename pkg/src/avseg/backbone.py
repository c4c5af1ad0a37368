"""Miniature pyramid backbone with delayed audio-visual alignment.

The image is cut into non-overlapping patches, linearly embedded, and pushed
through four transformer stages. Between stages a 2x2 patch merge halves each
grid axis (ceil division, edge cells duplicated on odd grids) and widens the
channel count. Refined audio queries can be injected ahead of a stage's
transformer blocks through a dual cross-attention pair:

    filtered  = Attn(Q_s,        H_v W_k1, H_v W_v1)   audio-guided filtering
    enhanced  = Attn(H_v W_q2,   H_a W_k2, H_a W_v2)   visual-guided enhancement

where Q_s is the adapter-projected query set and H_a the filtered result.
Both attentions sit inside residual + layer-norm wrappers by default; a
``literal`` flag strips the wrappers so tests can pin the bare equations.
Which stages receive the injection is the schedule; the default is the two
deepest stages, and an empty schedule makes the backbone a pure visual tower.

Decoding is one linear scorer per stage-4 token followed by a fixed bilinear
lift back to pixel resolution (the lift is a constant matrix, cached per
geometry).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ParameterError, ShapeError
from .layers import (
    LayerNormParams,
    LinearParams,
    ParamRegistry,
    TransformerBlockParams,
    apply_ln,
    init_layer_norm,
    init_linear,
    init_transformer_block,
    linear,
    transformer_block,
    xavier,
)
from .queries import QuerySet

__all__ = [
    "DEFAULT_WIDTHS",
    "DEFAULT_DEPTHS",
    "VisualFeatureMap",
    "InjectionSchedule",
    "AlignParams",
    "StageParams",
    "BackboneParams",
    "init_backbone",
    "patch_embed",
    "merge_tokens",
    "audio_guided_filtering",
    "visual_guided_enhancement",
    "align_block",
    "forward_backbone",
    "decode_mask",
    "bilinear_matrix",
]

DEFAULT_WIDTHS = (32, 64, 128, 160)
DEFAULT_DEPTHS = (1, 1, 2, 1)
N_STAGES = 4
DECODE_BIAS = -2.8  # logit of the dataset's mean foreground fraction


@dataclass
class VisualFeatureMap:
    """Token matrix plus the grid geometry it was raveled from (row-major)."""

    tokens: DiffArray  # (grid_h * grid_w, width)
    grid_h: int
    grid_w: int
    stage: int

    @property
    def width(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True)
class InjectionSchedule:
    """Which stages (1-based) receive the audio alignment block."""

    stages: frozenset[int] = frozenset({3, 4})

    def __post_init__(self):
        bad = set(self.stages) - set(range(1, N_STAGES + 1))
        if bad:
            raise ParameterError(f"injection stages out of range 1..{N_STAGES}: {sorted(bad)}")
        object.__setattr__(self, "stages", frozenset(int(s) for s in self.stages))

    @classmethod
    def parse(cls, text: str) -> "InjectionSchedule":
        """Parse '3,4' (or the empty string / 'none' for no injection)."""
        text = text.strip()
        if text in ("", "none"):
            return cls(frozenset())
        try:
            return cls(frozenset(int(t) for t in text.split(",")))
        except ValueError as e:
            raise ParameterError(f"cannot parse injection schedule {text!r}") from e

    def __contains__(self, stage: int) -> bool:
        return stage in self.stages

    def __str__(self) -> str:
        return ",".join(str(s) for s in sorted(self.stages)) or "none"


@dataclass
class AlignParams:
    adapter: LinearParams  # query width -> stage width
    wk1: DiffArray
    wv1: DiffArray
    wq2: DiffArray
    wk2: DiffArray
    wv2: DiffArray
    ln_audio: LayerNormParams
    ln_visual: LayerNormParams


@dataclass
class StageParams:
    blocks: list[TransformerBlockParams]
    align: AlignParams | None = None


@dataclass
class BackboneParams:
    patch: int
    widths: tuple[int, ...]
    embed: LinearParams
    stages: list[StageParams]
    merges: list[LinearParams]  # between consecutive stages, 4*w_in -> w_out
    decode: LinearParams  # w_last -> 1
    schedule: InjectionSchedule = field(default_factory=InjectionSchedule)


def init_align(
    reg: ParamRegistry, prefix: str, rng, d_query: int, d_stage: int
) -> AlignParams:
    return AlignParams(
        adapter=init_linear(reg, f"{prefix}.adapter", rng, d_query, d_stage),
        wk1=reg.add(f"{prefix}.wk1", xavier(rng, d_stage, d_stage)),
        wv1=reg.add(f"{prefix}.wv1", xavier(rng, d_stage, d_stage)),
        wq2=reg.add(f"{prefix}.wq2", xavier(rng, d_stage, d_stage)),
        wk2=reg.add(f"{prefix}.wk2", xavier(rng, d_stage, d_stage)),
        wv2=reg.add(f"{prefix}.wv2", xavier(rng, d_stage, d_stage)),
        ln_audio=init_layer_norm(reg, f"{prefix}.ln_audio", d_stage),
        ln_visual=init_layer_norm(reg, f"{prefix}.ln_visual", d_stage),
    )


def init_backbone(
    reg: ParamRegistry,
    rng: np.random.Generator,
    d_query: int,
    patch: int = 2,
    widths: tuple[int, ...] = DEFAULT_WIDTHS,
    depths: tuple[int, ...] = DEFAULT_DEPTHS,
    n_heads: int = 2,
    ff_ratio: int = 2,
    schedule: InjectionSchedule | None = None,
    prefix: str = "backbone",
) -> BackboneParams:
    """Build all backbone parameters; alignment blocks only for scheduled stages."""
    if len(widths) != N_STAGES or len(depths) != N_STAGES:
        raise ParameterError(f"need {N_STAGES} widths and depths, got {widths} / {depths}")
    if patch < 1:
        raise ParameterError("patch size must be positive")
    schedule = schedule or InjectionSchedule()

    embed = init_linear(reg, f"{prefix}.embed", rng, patch * patch * 3, widths[0])
    stages = []
    for s in range(1, N_STAGES + 1):
        w = widths[s - 1]
        align = None
        if s in schedule:
            align = init_align(reg, f"{prefix}.stage{s}.align", rng, d_query, w)
        blocks = [
            init_transformer_block(reg, f"{prefix}.stage{s}.block{b}", rng, w, n_heads, ff_ratio)
            for b in range(depths[s - 1])
        ]
        stages.append(StageParams(blocks, align))
    merges = [
        init_linear(reg, f"{prefix}.merge{s}", rng, 4 * widths[s - 1], widths[s])
        for s in range(1, N_STAGES)
    ]
    decode = init_linear(reg, f"{prefix}.decode", rng, widths[-1], 1)
    # start mask logits at the scene-average foreground log-odds (~6% fg) so
    # early steps refine geometry instead of slamming everything to background
    assert decode.b is not None
    decode.b.values[:] = DECODE_BIAS
    return BackboneParams(patch, tuple(widths), embed, stages, merges, decode, schedule)


def _gather_rows(x: DiffArray, rows: np.ndarray) -> DiffArray:
    d = x.shape[1]
    idx = rows[:, None] * d + np.arange(d)[None, :]
    return ad.take_flat(x, idx)


def patch_embed(image: np.ndarray, embed: LinearParams, patch: int) -> VisualFeatureMap:
    """Cut (H, W, 3) into patch*patch tiles, flatten, and embed linearly."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w, _ = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    tiles = img.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    flat = tiles.reshape(gh * gw, patch * patch * 3)
    return VisualFeatureMap(linear(ad.constant(flat), embed), gh, gw, stage=0)


def merge_tokens(vfm: VisualFeatureMap, merge: LinearParams) -> VisualFeatureMap:
    """2x2 token merge with ceil-halved output grid; edges clamp on odd sizes."""
    gh, gw = vfm.grid_h, vfm.grid_w
    oh, ow = (gh + 1) // 2, (gw + 1) // 2
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    quadrants = []
    for di in (0, 1):
        for dj in (0, 1):
            ri = np.minimum(2 * oi + di, gh - 1)
            rj = np.minimum(2 * oj + dj, gw - 1)
            quadrants.append(_gather_rows(vfm.tokens, (ri * gw + rj).reshape(-1)))
    stacked = ad.concat_cols(quadrants)
    return VisualFeatureMap(linear(stacked, merge), oh, ow, vfm.stage)


def audio_guided_filtering(queries_s: DiffArray, visual: DiffArray, p: AlignParams) -> DiffArray:
    """Queries attend over projected visual tokens: Attn(Q_s, H_v Wk1, H_v Wv1)."""
    keys = ad.matmul(visual, p.wk1)
    values = ad.matmul(visual, p.wv1)
    return ad.scaled_dot_attention(queries_s, keys, values)


def visual_guided_enhancement(visual: DiffArray, audio: DiffArray, p: AlignParams) -> DiffArray:
    """Visual tokens attend over audio-filtered features: Attn(H_v Wq2, H_a Wk2, H_a Wv2)."""
    q = ad.matmul(visual, p.wq2)
    keys = ad.matmul(audio, p.wk2)
    values = ad.matmul(audio, p.wv2)
    return ad.scaled_dot_attention(q, keys, values)


def align_block(
    vfm: VisualFeatureMap, queries: DiffArray, p: AlignParams, literal: bool = False
) -> VisualFeatureMap:
    """Dual cross-attention injection at one stage.

    ``literal=True`` evaluates the bare attention equations with no residual or
    layer-norm wrappers (test hook; training always uses the wrapped form).
    """
    q_s = linear(queries, p.adapter)
    filtered = audio_guided_filtering(q_s, vfm.tokens, p)
    h_audio = filtered if literal else apply_ln(ad.add(q_s, filtered), p.ln_audio)
    enhanced = visual_guided_enhancement(vfm.tokens, h_audio, p)
    tokens = enhanced if literal else apply_ln(ad.add(vfm.tokens, enhanced), p.ln_visual)
    return VisualFeatureMap(tokens, vfm.grid_h, vfm.grid_w, vfm.stage)


def forward_backbone(
    image: np.ndarray,
    queries: QuerySet | None,
    p: BackboneParams,
    literal: bool = False,
) -> VisualFeatureMap:
    """Run all four stages; inject queries where the schedule says to."""
    needs_queries = bool(p.schedule.stages)
    if needs_queries:
        if queries is None:
            raise ParameterError("schedule requires queries but none were given")
        if queries.stage != "refined":
            raise ParameterError(f"backbone expects refined queries, got {queries.stage!r}")

    vfm = patch_embed(image, p.embed, p.patch)
    for s in range(1, N_STAGES + 1):
        stage = p.stages[s - 1]
        vfm = VisualFeatureMap(vfm.tokens, vfm.grid_h, vfm.grid_w, s)
        if s in p.schedule:
            assert stage.align is not None
            vfm = align_block(vfm, queries.vectors, stage.align, literal)
        tokens = vfm.tokens
        for blk in stage.blocks:
            tokens = transformer_block(tokens, blk)
        vfm = VisualFeatureMap(tokens, vfm.grid_h, vfm.grid_w, s)
        if s < N_STAGES:
            vfm = merge_tokens(vfm, p.merges[s - 1])
    return vfm


_BILINEAR_CACHE: dict[tuple[int, int, int, int], np.ndarray] = {}


def bilinear_matrix(src_h: int, src_w: int, dst_h: int, dst_w: int) -> np.ndarray:
    """Constant (dst_h*dst_w, src_h*src_w) bilinear interpolation operator.

    Sample positions follow the half-pixel (align_corners=False) convention;
    every row is a convex combination, so row sums are exactly 1.
    """
    key = (src_h, src_w, dst_h, dst_w)
    cached = _BILINEAR_CACHE.get(key)
    if cached is not None:
        return cached

    def axis(src: int, dst: int) -> np.ndarray:
        w = np.zeros((dst, src))
        if src == 1:
            w[:, 0] = 1.0
            return w
        pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0.0, src - 1.0)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        frac = pos - lo
        w[np.arange(dst), lo] += 1.0 - frac
        w[np.arange(dst), hi] += frac
        return w

    rows = axis(src_h, dst_h)
    cols = axis(src_w, dst_w)
    u = np.einsum("Hh,Ww->HWhw", rows, cols).reshape(dst_h * dst_w, src_h * src_w)
    _BILINEAR_CACHE[key] = u
    return u


def decode_mask(vfm: VisualFeatureMap, decode: LinearParams, out_h: int, out_w: int) -> DiffArray:
    """Per-token linear score lifted to (out_h, out_w) logits bilinearly."""
    scores = linear(vfm.tokens, decode)  # (N, 1)
    lift = ad.constant(bilinear_matrix(vfm.grid_h, vfm.grid_w, out_h, out_w))
    return ad.reshape(ad.matmul(lift, scores), (out_h, out_w))
