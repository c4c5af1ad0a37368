"""Acceptance gate: ten end-to-end properties, each with an explicit budget.

Numeric thresholds for the trained-model gates live in
tests/fixtures/calibration.json, written once from a calibration run and
committed; no threshold is invented inline. Gates 7-9 share three trainings
at the default configuration (module-scoped fixtures), so expect this module
to take 15-20 minutes of CPU on its own.
"""

from __future__ import annotations

import json
import math
import os
import pathlib
import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from avseg import autodiff as ad
from avseg import instrument
from avseg.audio import synth_waveform
from avseg.backbone import VisualFeatureMap, align_block, init_align
from avseg.bank import EmbeddingSet, build_bank, kmeans_pp, load_bank, save_bank
from avseg.cli import main
from avseg.config import load_config
from avseg.contrast import ContrastivePair, info_nce
from avseg.evaluation import eval_split, write_report_csv
from avseg.layers import ParamRegistry
from avseg.losses import EPS, LOG_EPS, MaskPair, ce_loss, dice_loss, focal_loss, iou_loss
from avseg.metrics import binarize, f_score_metric
from avseg.model import build_model, default_bank, derived_seed
from avseg.optim import AdamW
from avseg.queries import QuerySet, init_bank_refine, refine_with_bank
from avseg.scenes import generate_scene, make_split
from avseg.training import train_run

FIXTURE_PATH = pathlib.Path(__file__).parent / "fixtures" / "calibration.json"
FIXTURE = json.loads(FIXTURE_PATH.read_text())
THR = FIXTURE["thresholds"]
CAL_SEED = FIXTURE["config"]["seed"]



def micro_overrides(out_dir, **extra):
    base = {
        "run.out_dir": str(out_dir),
        "data.image_size": "16",
        "data.duration_s": "0.25",
        "data.train_per_scenario": "2",
        "data.val_per_scenario": "1",
        "model.widths": "4,4,4,4",
        "model.depths": "1,1,1,1",
        "model.n_heads": "1",
        "model.d_model": "8",
        "model.query_blocks": "1",
        "model.query_heads": "1",
        "model.n_mels": "8",
        "model.n_queries": "2",
        "bank.modes_per_class": "2",
        "bank.nearest_per_mode": "2",
        "optim.batch_size": "2",
        "optim.steps": "3",
        "log.eval_per_scenario": "1",
    }
    base.update(extra)
    return base


def rows_by_name(rows):
    return {r.scenario: r for r in rows}


# ---------------------------------------------------------------- gate 1


def test_01_gradient_fidelity(tmp_path, capsys):
    t0 = time.perf_counter()
    rc = main(["gradcheck", "--out-dir", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    assert rc == 0, out
    line = next(l for l in out.splitlines() if l.startswith("max relative error"))
    err = float(line.split(":")[1].split("over")[0])
    assert err < 1e-4, f"max relative error {err:.3e}"
    assert elapsed < 60.0, f"gradcheck took {elapsed:.1f}s"
    print(f"gate 01 PASS: full-loss gradcheck {err:.3e} < 1e-4 in {elapsed:.1f}s")


# ---------------------------------------------------------------- gate 2


def _ref_ce(p, y, eps):
    total = math.fsum(
        y[i, j] * math.log(p[i, j] + eps) + (1 - y[i, j]) * math.log(1 - p[i, j] + eps)
        for i in range(p.shape[0])
        for j in range(p.shape[1])
    )
    return -total / p.size


def _ref_focal(p, y, eps, gamma=2.0, alpha=0.25):
    total = math.fsum(
        alpha * y[i, j] * (1 - p[i, j]) ** gamma * math.log(p[i, j] + eps)
        + (1 - alpha) * (1 - y[i, j]) * p[i, j] ** gamma * math.log(1 - p[i, j] + eps)
        for i in range(p.shape[0])
        for j in range(p.shape[1])
    )
    return -total / p.size


def _ref_dice(p, y, eps):
    overlap = math.fsum(p[i, j] * y[i, j] for i in range(8) for j in range(8))
    return 1.0 - (2.0 * overlap + eps) / (p.sum() + y.sum() + eps)


def _ref_iou(p, y, eps):
    inter = math.fsum(p[i, j] * y[i, j] for i in range(8) for j in range(8))
    union = p.sum() + y.sum() - inter
    return 1.0 - (inter + eps) / (union + eps)


def test_02_loss_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    for _ in range(100):
        p = rng.uniform(0.01, 0.99, size=(8, 8))
        y = (rng.random((8, 8)) < 0.5).astype(np.float64)
        mp = MaskPair(ad.constant(p), y)
        np.testing.assert_allclose(ce_loss(mp).values.item(), _ref_ce(p, y, LOG_EPS), rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            focal_loss(mp).values.item(), _ref_focal(p, y, LOG_EPS), rtol=0, atol=1e-12
        )
        np.testing.assert_allclose(dice_loss(mp).values.item(), _ref_dice(p, y, EPS), rtol=0, atol=1e-12)
        np.testing.assert_allclose(iou_loss(mp).values.item(), _ref_iou(p, y, EPS), rtol=0, atol=1e-12)

    # dice and IoU coefficients on binary pairs obey D = 2I/(1+I); the
    # smoothing constant is set to zero so the identity is exact
    for _ in range(100):
        pred = (rng.random((8, 8)) < 0.5).astype(np.float64)
        gt = (rng.random((8, 8)) < 0.5).astype(np.float64)
        if pred.sum() + gt.sum() == 0:
            continue  # astronomically unlikely; identity is 1 = 1 anyway
        mp = MaskPair(ad.constant(pred), gt)
        d = 1.0 - dice_loss(mp, eps=0.0).values.item()
        i = 1.0 - iou_loss(mp, eps=0.0).values.item()
        assert abs(d - 2.0 * i / (1.0 + i)) < 1e-9

    # F equals r whenever precision and recall both equal r
    flat = np.arange(64)
    for n in (4, 7, 10, 16):
        for k in range(1, n + 1):
            gt = np.isin(flat, flat[:n]).reshape(8, 8)
            pred = np.isin(flat, flat[n - k : 2 * n - k]).reshape(8, 8)
            r = k / n
            assert abs(f_score_metric(pred, gt) - r) <= 1e-12
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"loss oracles took {elapsed:.1f}s"
    print(f"gate 02 PASS: loss oracles at 1e-12, identities at 1e-9/1e-12, {elapsed:.1f}s")


# ---------------------------------------------------------------- gate 3


def test_03_infonce_analytics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    for n in (2, 5, 8):
        v = rng.standard_normal(6)
        v /= np.linalg.norm(v)
        tile = np.tile(v, (n, 1))
        loss = info_nce(ContrastivePair(ad.constant(tile), ad.constant(tile), tau=0.07))
        assert abs(loss.values.item() - math.log(n)) <= 1e-9, f"n={n}"

    for n, tau in ((2, 0.07), (5, 0.07), (8, 0.07), (5, 0.5)):
        eye = np.eye(8)[:n]
        loss = info_nce(ContrastivePair(ad.constant(eye), ad.constant(eye), tau=tau))
        expected = math.log(1.0 + (n - 1) * math.exp(-1.0 / tau))
        assert abs(loss.values.item() - expected) <= 1e-6, f"n={n} tau={tau}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, f"contrastive analytics took {elapsed:.2f}s"
    print(f"gate 03 PASS: ln(n) at 1e-9 and orthonormal closed form at 1e-6, {elapsed:.2f}s")


# ---------------------------------------------------------------- gate 4


def test_04_attention_rows_are_distributions(monkeypatch):
    t0 = time.perf_counter()
    captured = []
    real = ad.softmax_rows

    def spy(x):
        out = real(x)
        captured.append(np.array(out.values))
        return out

    monkeypatch.setattr(ad, "softmax_rows", spy)
    rng = np.random.default_rng(4)

    from avseg.bank import PrototypeBank

    for _ in range(100):  # bank-anchored query refinement
        n, d, rows, d_bank = rng.integers(1, 7), rng.integers(4, 13), rng.integers(1, 11), rng.integers(3, 9)
        reg = ParamRegistry()
        ref = init_bank_refine(reg, rng, int(d), int(d_bank))
        bank = PrototypeBank(rng.standard_normal((rows, d_bank)) * 3.0, np.zeros(rows, dtype=int))
        q = QuerySet(ad.constant(rng.standard_normal((n, d))), "generated")
        refine_with_bank(q, bank, ref)

    for _ in range(100):  # dual cross-attention injection (both directions)
        d_query, w = int(rng.integers(4, 10)), int(rng.integers(4, 10))
        gh, gw = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        n = int(rng.integers(1, 7))
        reg = ParamRegistry()
        p = init_align(reg, "align", rng, d_query, w)
        vfm = VisualFeatureMap(ad.constant(rng.standard_normal((gh * gw, w)) * 2.0), gh, gw, 3)
        align_block(vfm, ad.constant(rng.standard_normal((n, d_query))), p)

    assert len(captured) >= 200, f"only {len(captured)} attention maps seen"
    rows_checked = 0
    for att in captured:
        assert att.min() >= 0.0
        np.testing.assert_allclose(att.sum(axis=1), np.ones(att.shape[0]), rtol=0, atol=1e-9)
        rows_checked += att.shape[0]
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"attention property test took {elapsed:.1f}s"
    print(
        f"gate 04 PASS: {rows_checked} softmax rows over {len(captured)} maps sum to 1 +/- 1e-9, "
        f"{elapsed:.1f}s"
    )


# ---------------------------------------------------------------- gate 5


def test_05_structural_isolation(tmp_path):
    t0 = time.perf_counter()
    scene = generate_scene("multi_class", seed=5, image_size=16, n_classes=4, duration_s=0.25)

    # empty injection schedule: prediction is bitwise invariant to the audio
    cfg = load_config(overrides=micro_overrides(tmp_path, **{"model.inject": "none"}))
    model = build_model(cfg)
    silent = replace(scene, waveform=synth_waveform(3, seed=99, duration_s=0.25))
    assert np.array_equal(model.predict(scene), model.predict(silent))

    # gamma 0: prediction is bitwise invariant to the bank contents
    cfg_g = load_config(overrides=micro_overrides(tmp_path, **{"model.gamma": "0"}))
    cfg_other = load_config(overrides=micro_overrides(tmp_path, **{"model.gamma": "0", "run.seed": "9"}))
    model_a = build_model(cfg_g, default_bank(cfg_g))
    model_b = build_model(cfg_g, default_bank(cfg_other))
    assert np.array_equal(model_a.predict(scene), model_b.predict(scene))

    # zero contrastive weight: augmentation and projection never execute
    cfg_c = load_config(overrides=micro_overrides(tmp_path, **{"loss.contrast": "0"}))
    model_c = build_model(cfg_c)
    instrument.reset()
    total, _ = model_c.training_loss(scene, aug_seed=1)
    total.backward()
    model_c.predict(scene)
    counts = instrument.snapshot()
    for name in ("augment_chain", "projection_head", "contrastive_branch"):
        assert counts.get(name, 0) == 0, counts
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"isolation checks took {elapsed:.1f}s"
    print(f"gate 05 PASS: audio/bank/contrastive paths isolate structurally, {elapsed:.1f}s")


# ---------------------------------------------------------------- gate 6


def test_06_bank_construction(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    means = np.array([[-1.5, 0.0, 1.0, 0.5], [1.5, 1.0, -1.0, -0.5]])
    pts = np.vstack([m + 0.1 * rng.standard_normal((150, 4)) for m in means])
    result = kmeans_pp(pts, 2, seed=0)
    # match each centroid to its nearest true mean
    d = np.linalg.norm(result.centroids[:, None, :] - means[None, :, :], axis=2)
    order = d.argmin(axis=1)
    assert sorted(order) == [0, 1], "both blobs must be claimed"
    for c, m in zip(result.centroids, means[order]):
        assert np.linalg.norm(c - m) < 0.1

    sets = [EmbeddingSet(c, rng.standard_normal((20, 8)) + 3 * c) for c in range(3)]
    bank = build_bank(sets, k_per_class=2, m_nearest=2, seed=1)
    path = os.path.join(tmp_path, "bank.davb")
    save_bank(path, bank)
    loaded = load_bank(path)
    assert loaded.prototypes.tobytes() == bank.prototypes.tobytes()
    assert np.array_equal(loaded.class_ids, bank.class_ids)

    # bank rows stay frozen through a real optimization step
    cfg = load_config(overrides=micro_overrides(tmp_path))
    model = build_model(cfg)
    frozen = model.bank.prototypes.tobytes()
    before = {name: p.values.copy() for name, p in model.registry.items()}
    opt = AdamW(model.registry, lr=1e-3)
    scene = generate_scene("single", seed=6, image_size=16, n_classes=4, duration_s=0.25)
    total, _ = model.training_loss(scene, aug_seed=2)
    total.backward()
    opt.step()
    assert model.bank.prototypes.tobytes() == frozen
    assert all("bank" not in name for name, _ in model.registry.items())
    moved = sum(
        0 if np.array_equal(before[name], p.values) else 1 for name, p in model.registry.items()
    )
    assert moved == len(before), "every trainable tensor should move"
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"bank checks took {elapsed:.1f}s"
    print(f"gate 06 PASS: blob recovery < 0.1, round-trip bit-exact, bank frozen, {elapsed:.1f}s")


# ------------------------------------------------------- gates 7-9 fixtures


def _train_and_eval(tmp_path_factory, tag, **extra):
    out = tmp_path_factory.mktemp(tag)
    overrides = {"run.out_dir": str(out), "run.seed": str(CAL_SEED)}
    overrides.update(extra)
    cfg = load_config(overrides=overrides)
    t0 = time.perf_counter()
    art = train_run(cfg)
    elapsed = time.perf_counter() - t0
    val = rows_by_name(eval_split(art.model, cfg, "val"))
    return SimpleNamespace(cfg=cfg, art=art, elapsed=elapsed, val=val)


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    return _train_and_eval(tmp_path_factory, "default_run")


@pytest.fixture(scope="module")
def no_audio_run(tmp_path_factory):
    return _train_and_eval(
        tmp_path_factory, "no_audio_run", **{"model.inject": "none", "loss.contrast": "0"}
    )


@pytest.fixture(scope="module")
def early_inject_run(tmp_path_factory):
    return _train_and_eval(tmp_path_factory, "early_inject_run", **{"model.inject": "1"})


# ---------------------------------------------------------------- gate 7


def test_07_desk_scale_learning(default_run):
    assert default_run.elapsed < 1200.0, f"training took {default_run.elapsed:.0f}s"
    single = default_run.val["single"].jf
    overall = default_run.val["overall"].jf
    assert single >= THR["single_jf_min"], f"single-source J&F {single:.4f}"
    assert overall >= THR["overall_jf_min"], f"overall J&F {overall:.4f}"

    # sanity anchors: the gain is from training, and the split held out
    untrained = rows_by_name(eval_split(build_model(default_run.cfg), default_run.cfg, "val"))
    assert untrained["single"].jf < THR["untrained_single_jf_max"]
    train_fold = rows_by_name(eval_split(default_run.art.model, default_run.cfg, "train"))
    assert train_fold["overall"].jf >= overall - 1e-12
    print(
        f"gate 07 PASS: single {single:.4f} >= {THR['single_jf_min']}, "
        f"overall {overall:.4f} >= {THR['overall_jf_min']}, "
        f"untrained {untrained['single'].jf:.4f}, {default_run.elapsed:.0f}s train"
    )


# ---------------------------------------------------------------- gate 8


def test_08_ablation_directionality(default_run, no_audio_run, early_inject_run):
    full = default_run.val["overall"].jf
    base = no_audio_run.val["overall"].jf
    early = early_inject_run.val["overall"].jf
    margin = THR["ablation_margin"]
    assert full >= base + margin, f"full {full:.4f} vs audio-free baseline {base:.4f}"
    assert full >= early, f"late schedule {full:.4f} vs early schedule {early:.4f}"
    print(
        f"gate 08 PASS: full {full:.4f} >= baseline {base:.4f} + {margin}, "
        f"late {full:.4f} >= early {early:.4f}"
    )


# ---------------------------------------------------------------- gate 9


def test_09_off_screen_suppression(default_run):
    scenes = make_split(default_run.cfg.dataset_spec(), "val", default_run.cfg.seed)
    fraction = {}
    for scenario in ("single", "off_screen"):
        fr = [
            float(binarize(default_run.art.model.predict(s)).mean())
            for s in scenes
            if s.scenario == scenario
        ]
        fraction[scenario] = float(np.mean(fr))
    assert fraction["single"] > 0.0, "trained model should segment the sounding object"
    ratio = fraction["off_screen"] / fraction["single"]
    assert ratio <= THR["off_screen_fraction_ratio_max"], (
        f"off-screen fg fraction {fraction['off_screen']:.4f} vs single {fraction['single']:.4f}"
    )
    print(
        f"gate 09 PASS: off-screen fg ratio {ratio:.4f} <= {THR['off_screen_fraction_ratio_max']}"
    )


# ---------------------------------------------------------------- gate 10


def test_10_determinism(tmp_path):
    cfg = load_config(overrides=micro_overrides(tmp_path / "run", **{"optim.steps": "4"}))

    def one_pass():
        art = train_run(cfg)
        rows = eval_split(art.model, cfg, "val")
        report = os.path.join(cfg.out_dir, "eval_val.csv")
        write_report_csv(rows, report)
        names = (art.checkpoint_path, art.log_path, report)
        return tuple(open(n, "rb").read() for n in names)

    first = one_pass()
    second = one_pass()
    for a, b, what in zip(first, second, ("checkpoint", "train log", "report")):
        assert a == b, f"{what} differs between identical runs"
    print("gate 10 PASS: repeated train/eval bytes identical (checkpoint, log, report)")
