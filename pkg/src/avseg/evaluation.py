"""Evaluation reports: per-scenario and overall J, F, and J&F.

Evaluation is pure inference. It never runs augmentation or the contrastive
branch; the instrumentation counters stay at zero, which the tests assert.
The report is written both as CSV and as a human-readable table, and an
optional PNG export renders (image, ground truth, prediction) triptychs.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config_text
from .metrics import binarize, f_score_metric, jaccard_metric
from .model import Model, build_model, default_bank
from .scenes import SCENARIOS, Scene, make_split

__all__ = [
    "EvalRow",
    "evaluate_model",
    "model_from_checkpoint",
    "write_report_csv",
    "format_report",
    "save_triptychs",
]

REPORT_HEADER = ("scenario", "count", "jaccard", "f_score", "jf")


@dataclass
class EvalRow:
    scenario: str  # one scenario name, or "overall"
    count: int
    jaccard: float
    f_score: float
    jf: float


def evaluate_model(model: Model, scenes: list[Scene]) -> list[EvalRow]:
    """One row per scenario present (in canonical order) plus an overall row."""
    per_scene: list[tuple[str, float, float]] = []
    for scene in scenes:
        pred = binarize(model.predict(scene))
        j = jaccard_metric(pred, scene.gt_mask)
        f = f_score_metric(pred, scene.gt_mask)
        per_scene.append((scene.scenario, j, f))

    rows = []
    for scenario in SCENARIOS:
        js = [j for s, j, _ in per_scene if s == scenario]
        fs = [f for s, _, f in per_scene if s == scenario]
        if js:
            rows.append(_row(scenario, js, fs))
    rows.append(_row("overall", [j for _, j, _ in per_scene], [f for _, _, f in per_scene]))
    return rows


def _row(name: str, js: list[float], fs: list[float]) -> EvalRow:
    j, f = float(np.mean(js)), float(np.mean(fs))
    return EvalRow(name, len(js), j, f, (j + f) / 2.0)


def model_from_checkpoint(path: str, overrides: dict | None = None) -> tuple[Model, RunConfig]:
    """Rebuild the exact model a checkpoint was saved from and load it.

    The config snapshot inside the checkpoint drives the rebuild; the bank is
    reconstructed the same way training built it (from the bank file if the
    config names one, otherwise deterministically from the seed).
    """
    ck = load_checkpoint(path)
    cfg = load_config_text(ck.config_text, overrides)
    bank = None
    if not cfg.bank_path:
        weights = cfg.loss_weights()
        if cfg.injection().stages or weights.contrast > 0:
            bank = default_bank(cfg)
    else:
        from .bank import load_bank

        bank = load_bank(cfg.bank_path)
    model = build_model(cfg, bank)
    model.load_arrays(ck.arrays)
    return model, cfg


def eval_split(model: Model, cfg: RunConfig, split: str) -> list[EvalRow]:
    return evaluate_model(model, make_split(cfg.dataset_spec(), split, cfg.seed))


def write_report_csv(rows: list[EvalRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for r in rows:
            writer.writerow([r.scenario, str(r.count), repr(r.jaccard), repr(r.f_score), repr(r.jf)])


def format_report(rows: list[EvalRow]) -> str:
    lines = [f"{'scenario':<16}{'count':>6}{'J':>9}{'F':>9}{'J&F':>9}"]
    for r in rows:
        lines.append(f"{r.scenario:<16}{r.count:>6}{r.jaccard:>9.4f}{r.f_score:>9.4f}{r.jf:>9.4f}")
    return "\n".join(lines)


def save_triptychs(model: Model, scenes: list[Scene], out_dir: str, limit: int = 10) -> list[str]:
    """PNG panels (image | ground truth | prediction) for visual inspection."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, scene in enumerate(scenes[:limit]):
        probs = model.predict(scene)
        h, w = scene.gt_mask.shape
        gap = np.ones((h, 2, 3))
        gt_rgb = np.repeat(scene.gt_mask.astype(np.float64)[:, :, None], 3, axis=2)
        pred_rgb = np.repeat(probs[:, :, None], 3, axis=2)
        panel = np.concatenate([scene.image, gap, gt_rgb, gap, pred_rgb], axis=1)
        img = Image.fromarray((np.clip(panel, 0, 1) * 255).astype(np.uint8))
        path = os.path.join(out_dir, f"scene_{i:03d}_{scene.scenario}.png")
        img.save(path)
        paths.append(path)
    return paths
