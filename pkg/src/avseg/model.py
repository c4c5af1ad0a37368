"""The full audio-visual segmentation model, wired from a run config.

A model owns one parameter registry. Which branches exist is decided at build
time from the config:

* the audio branch (mel projection, query generator, bank refinement) exists
  when queries are consumed anywhere, i.e. the injection schedule is nonempty
  or the contrastive weight is positive;
* the contrastive projection head exists only when the contrastive weight is
  positive.

A run with an empty schedule and zero contrastive weight therefore contains
no audio parameters at all and never touches a waveform, which makes it the
visual-only baseline for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audio import AugmentConfig, Waveform, augment_chain, class_embedding, log_mel
from .autodiff import DiffArray
from .backbone import BackboneParams, decode_mask, forward_backbone, init_backbone
from .bank import EmbeddingSet, PrototypeBank, build_bank
from .config import RunConfig
from .contrast import ProjectionHeadParams, init_projection_head, paired_contrastive_loss, project_normalize
from .errors import ParameterError, ShapeError
from .layers import LinearParams, ParamRegistry, init_linear
from .losses import LossWeights, MaskPair, loss_terms, weighted_total
from .queries import (
    BankRefineParams,
    QueryGeneratorParams,
    QuerySet,
    generate_queries,
    init_bank_refine,
    init_query_generator,
    project_audio,
    refine_with_bank,
)
from .scenes import Scene

__all__ = ["Model", "build_model", "default_bank", "derived_seed", "BANK_SAMPLES_PER_CLASS"]

# clean renderings per class used when a run builds its own bank
BANK_SAMPLES_PER_CLASS = 12


def derived_seed(*parts: int) -> int:
    """Mix integer coordinates into one well-spread rng seed."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def default_bank(cfg: RunConfig) -> PrototypeBank:
    """Prototype bank from clean class renderings, deterministic per seed."""
    sets = []
    for cls in range(cfg.n_classes):
        rows = np.stack(
            [
                class_embedding(cls, seed=derived_seed(cfg.seed, 2, cls, i), n_mels=cfg.n_mels)
                for i in range(BANK_SAMPLES_PER_CLASS)
            ]
        )
        sets.append(EmbeddingSet(cls, rows))
    return build_bank(
        sets,
        k_per_class=cfg.modes_per_class,
        m_nearest=cfg.nearest_per_mode,
        seed=cfg.seed,
        centroid_rows=cfg.centroid_rows,
    )


@dataclass
class Model:
    cfg: RunConfig
    registry: ParamRegistry
    backbone: BackboneParams
    bank: PrototypeBank | None = None
    audio_proj: LinearParams | None = None
    qgen: QueryGeneratorParams | None = None
    refine: BankRefineParams | None = None
    head: ProjectionHeadParams | None = None

    @property
    def audio_enabled(self) -> bool:
        return self.audio_proj is not None

    @property
    def injects_queries(self) -> bool:
        return bool(self.backbone.schedule.stages)

    def queries_for(self, w: Waveform) -> QuerySet:
        if not self.audio_enabled:
            raise ParameterError("this model has no audio branch")
        feats = project_audio(log_mel(w, n_mels=self.cfg.n_mels), self.audio_proj)
        return refine_with_bank(generate_queries(feats, self.qgen), self.bank, self.refine)

    def mask_probs(self, image: np.ndarray, queries: QuerySet | None) -> DiffArray:
        h, w = image.shape[0], image.shape[1]
        vfm = forward_backbone(image, queries, self.backbone)
        return ad.sigmoid(decode_mask(vfm, self.backbone.decode, h, w))

    def predict(self, scene: Scene) -> np.ndarray:
        """Foreground probabilities for one scene; no augmentation, no
        contrastive machinery, just the mask path."""
        with ad.no_grad():
            queries = self.queries_for(scene.waveform) if self.injects_queries else None
            return self.mask_probs(scene.image, queries).values

    def training_loss(self, scene: Scene, aug_seed) -> tuple[DiffArray, dict[str, float]]:
        """Total loss node for one scene plus the unweighted term values."""
        cfg = self.cfg
        weights = cfg.loss_weights()
        queries = self.queries_for(scene.waveform) if self.audio_enabled else None

        probs = self.mask_probs(scene.image, queries if self.injects_queries else None)
        mp = MaskPair(probs, scene.gt_mask.astype(np.float64))

        l_con = None
        if weights.contrast > 0:
            augmented, _ = augment_chain(scene.waveform, AugmentConfig(), aug_seed)
            q_aug = self.queries_for(augmented)
            zc = project_normalize(queries, self.head)
            za = project_normalize(q_aug, self.head)
            l_con = paired_contrastive_loss(zc, za, tau=cfg.tau)

        terms = loss_terms(mp, l_con, weights)
        total = weighted_total(terms, weights)
        return total, {name: node.values.item() for name, node in terms.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.registry.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.registry.items())
        if set(arrays) != set(own):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ParameterError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, values in arrays.items():
            p = own[name]
            if p.values.shape != values.shape:
                raise ShapeError(f"{name}: checkpoint shape {values.shape} != model {p.values.shape}")
            p.values[...] = values


def build_model(cfg: RunConfig, bank: PrototypeBank | None = None) -> Model:
    """Create all parameters for a config. One rng seeded by cfg.seed drives
    every init draw, so the same config always yields the same weights."""
    weights: LossWeights = cfg.loss_weights()
    schedule = cfg.injection()
    audio_enabled = bool(schedule.stages) or weights.contrast > 0

    rng = np.random.default_rng(cfg.seed)
    reg = ParamRegistry()

    audio_proj = qgen = refine = head = None
    if audio_enabled:
        if bank is None:
            bank = default_bank(cfg)
        audio_proj = init_linear(reg, "audio.proj", rng, cfg.n_mels, cfg.d_model)
        qgen = init_query_generator(
            reg, rng, cfg.n_queries, cfg.d_model, cfg.query_blocks, cfg.query_heads
        )
        refine = init_bank_refine(reg, rng, cfg.d_model, bank.width, cfg.gamma)
        if weights.contrast > 0:
            head = init_projection_head(reg, rng, cfg.d_model)
    else:
        bank = None

    backbone = init_backbone(
        reg,
        rng,
        d_query=cfg.d_model,
        patch=cfg.patch,
        widths=cfg.widths,
        depths=cfg.depths,
        n_heads=cfg.n_heads,
        schedule=schedule,
    )
    return Model(cfg, reg, backbone, bank, audio_proj, qgen, refine, head)
