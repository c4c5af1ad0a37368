"""Command-line surface.

Subcommands::

    synth generate    render benchmark scenes to PNG/WAV for inspection
    bank build        build and save a prototype bank
    bank inspect      print a saved bank's layout
    train             train per the config, write checkpoint + CSV log
    eval              evaluate a checkpoint, write report CSV (+ PNGs)
    augment           run the waveform augmentation chain once
    gradcheck         finite-difference audit of the full loss gradient
    ablate inject     train/eval across injection schedules, one CSV row each
    ablate queries    train/eval across query counts, one CSV row each

Every subcommand accepts ``--config``, ``--seed``, ``--out-dir`` and repeated
``--set section.key=value`` overrides. Exit codes: 0 on success, 1 with a
one-line diagnostic on any error, 2 for usage mistakes.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import autodiff as ad
from .audio import AugmentConfig, augment_chain, save_wav, synth_waveform
from .bank import bank_summary, load_bank, save_bank
from .config import RunConfig, canonical_dump, load_config, load_config_text
from .errors import AvsegError, ConfigError
from .evaluation import eval_split, format_report, model_from_checkpoint, save_triptychs, write_report_csv
from .model import build_model, default_bank, derived_seed
from .scenes import SCENARIOS, generate_scene, make_split
from .training import train_run

__all__ = ["main", "GRADCHECK_OVERRIDES", "GRADCHECK_THRESHOLD"]

# compact model used by `gradcheck` when no config is given: small enough to
# sweep every parameter coordinate against central differences in seconds
GRADCHECK_OVERRIDES = {
    "data.image_size": "16",
    "data.duration_s": "0.25",
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
}
GRADCHECK_THRESHOLD = 1e-4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, help="override [run] seed")
    parser.add_argument("--out-dir", help="override [run] out_dir")
    parser.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override any config option (repeatable)",
    )


def _resolve(args, extra_defaults: dict | None = None) -> RunConfig:
    overrides = dict(extra_defaults or {})
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set wants SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.out_dir is not None:
        overrides["run.out_dir"] = args.out_dir
    return load_config(args.config, overrides)


def _save_mask_png(path: str, mask: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((mask.astype(np.float64) * 255).astype(np.uint8)).save(path)


def _save_image_png(path: str, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


def cmd_synth_generate(args) -> int:
    cfg = _resolve(args)
    scene_dir = os.path.join(cfg.out_dir, "scenes")
    os.makedirs(scene_dir, exist_ok=True)
    wanted = [args.scenario] if args.scenario else list(SCENARIOS)
    for scenario in wanted:
        for i in range(args.count):
            scene = generate_scene(
                scenario,
                seed=[cfg.seed, 7, SCENARIOS.index(scenario), i],
                image_size=cfg.image_size,
                n_classes=cfg.n_classes,
                duration_s=cfg.duration_s,
            )
            stem = os.path.join(scene_dir, f"{scenario}_{i:03d}")
            _save_image_png(stem + ".png", scene.image)
            _save_mask_png(stem + "_gt.png", scene.gt_mask)
            save_wav(stem + ".wav", scene.waveform)
    print(f"wrote {len(wanted) * args.count} scenes to {scene_dir}")
    return 0


def cmd_bank_build(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = args.out or os.path.join(cfg.out_dir, "bank.davb")
    bank = default_bank(cfg)
    save_bank(out, bank)
    info = bank_summary(bank)
    print(f"bank: {info['rows']} rows x {info['width']} dims, classes {info['classes']} -> {out}")
    return 0


def cmd_bank_inspect(args) -> int:
    info = bank_summary(load_bank(args.path))
    for key, value in info.items():
        print(f"{key}: {value}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    art = train_run(cfg)
    rows = eval_split(art.model, cfg, "val")
    report_path = os.path.join(cfg.out_dir, "eval_val.csv")
    write_report_csv(rows, report_path)
    print(format_report(rows))
    print(f"checkpoint: {art.checkpoint_path}")
    print(f"train log:  {art.log_path}")
    print(f"report:     {report_path}")
    return 0


def cmd_eval(args) -> int:
    cfg_hint = _resolve(args)
    ckpt = args.checkpoint or os.path.join(cfg_hint.out_dir, "model.davc")
    # overrides must not reshape the network, but retargeting the output
    # directory or the evaluation seed is legitimate
    overrides = {}
    if args.out_dir:
        overrides["run.out_dir"] = args.out_dir
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    model, cfg = model_from_checkpoint(ckpt, overrides or None)
    rows = eval_split(model, cfg, args.split)
    os.makedirs(cfg.out_dir, exist_ok=True)
    report_path = os.path.join(cfg.out_dir, f"eval_{args.split}.csv")
    write_report_csv(rows, report_path)
    print(format_report(rows))
    print(f"report: {report_path}")
    if args.png:
        scenes = make_split(cfg.dataset_spec(), args.split, cfg.seed)
        paths = save_triptychs(model, scenes, os.path.join(cfg.out_dir, "triptychs"), args.png_limit)
        print(f"wrote {len(paths)} triptychs")
    return 0


def cmd_augment(args) -> int:
    cfg = _resolve(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    clean = synth_waveform(args.class_id, seed=cfg.seed, duration_s=cfg.duration_s)
    augmented, trace = augment_chain(clean, AugmentConfig(), seed=derived_seed(cfg.seed, 5))
    clean_path = os.path.join(cfg.out_dir, "augment_clean.wav")
    out_path = os.path.join(cfg.out_dir, "augment_out.wav")
    save_wav(clean_path, clean)
    save_wav(out_path, augmented)
    print(
        f"reverb {trace.reverb_mix_percent:.1f}%  pitch {trace.pitch_cents:+.1f} cents  "
        f"snr {trace.snr_db:.1f} dB  gain {trace.gain_db:+.2f} dB"
    )
    print(f"wrote {clean_path} and {out_path}")
    return 0


def cmd_gradcheck(args) -> int:
    defaults = None if args.config else dict(GRADCHECK_OVERRIDES)
    cfg = _resolve(args, defaults)
    model = build_model(cfg)
    scene = generate_scene(
        "single",
        seed=cfg.seed,
        image_size=cfg.image_size,
        n_classes=cfg.n_classes,
        duration_s=cfg.duration_s,
    )

    def f():
        total, _ = model.training_loss(scene, aug_seed=derived_seed(cfg.seed, 6))
        return total

    params = [p for _, p in model.registry.items()]
    err = ad.grad_check(f, params, step=1e-5)
    print(f"max relative error: {err:.3e} over {model.registry.total_size()} coordinates")
    if err < GRADCHECK_THRESHOLD:
        print(f"PASS (< {GRADCHECK_THRESHOLD:g})")
        return 0
    print(f"FAIL (>= {GRADCHECK_THRESHOLD:g})")
    return 1


def _ablate(cfg: RunConfig, variants: list[tuple[str, dict]], csv_name: str, label: str) -> int:
    """Train/eval one run per variant; one CSV row per variant."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_csv = os.path.join(cfg.out_dir, csv_name)
    results = []
    for tag, extra in variants:
        sub = dict(extra)
        sub["run.out_dir"] = os.path.join(cfg.out_dir, f"{label}_{tag}")
        run_cfg = load_config_like(cfg, sub)
        art = train_run(run_cfg)
        overall = eval_split(art.model, run_cfg, "val")[-1]
        results.append((tag, overall))
        print(f"{label}={tag}: J&F {overall.jf:.4f}")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([label, "jaccard", "f_score", "jf"])
        for tag, row in results:
            writer.writerow([tag, repr(row.jaccard), repr(row.f_score), repr(row.jf)])
    print(f"wrote {out_csv}")
    return 0


def load_config_like(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Re-derive a config from an existing one plus dotted overrides."""
    return load_config_text(canonical_dump(cfg), overrides)


def cmd_ablate_inject(args) -> int:
    cfg = _resolve(args)
    schedules = [s.strip() for s in args.schedules.split(";") if s.strip()]
    if not schedules:
        raise ConfigError("need at least one schedule")
    variants = [(s.replace(",", "+"), {"model.inject": s}) for s in schedules]
    return _ablate(cfg, variants, "ablate_inject.csv", "schedule")


def cmd_ablate_queries(args) -> int:
    cfg = _resolve(args)
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad query counts {args.counts!r}") from exc
    if not counts:
        raise ConfigError("need at least one query count")
    variants = [(str(n), {"model.n_queries": str(n)}) for n in counts]
    return _ablate(cfg, variants, "ablate_queries.csv", "n_queries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="synthetic benchmark tools")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    gen = synth_sub.add_parser("generate", help="render scenes to PNG/WAV")
    _add_common(gen)
    gen.add_argument("--count", type=int, default=1, help="scenes per scenario")
    gen.add_argument("--scenario", choices=SCENARIOS, help="restrict to one scenario")
    gen.set_defaults(func=cmd_synth_generate)

    bank = sub.add_parser("bank", help="prototype bank tools")
    bank_sub = bank.add_subparsers(dest="bank_command", required=True)
    bb = bank_sub.add_parser("build", help="build a bank from clean renderings")
    _add_common(bb)
    bb.add_argument("--out", help="output path (default <out_dir>/bank.davb)")
    bb.set_defaults(func=cmd_bank_build)
    bi = bank_sub.add_parser("inspect", help="describe a saved bank")
    bi.add_argument("path")
    bi.set_defaults(func=cmd_bank_inspect)

    tr = sub.add_parser("train", help="train a model")
    _add_common(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(ev)
    ev.add_argument("--checkpoint", help="path (default <out_dir>/model.davc)")
    ev.add_argument("--split", choices=("train", "val"), default="val")
    ev.add_argument("--png", action="store_true", help="also write triptych PNGs")
    ev.add_argument("--png-limit", type=int, default=10)
    ev.set_defaults(func=cmd_eval)

    aug = sub.add_parser("augment", help="run the augmentation chain once")
    _add_common(aug)
    aug.add_argument("--class-id", type=int, default=0)
    aug.set_defaults(func=cmd_augment)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(gc)
    gc.set_defaults(func=cmd_gradcheck)

    abl = sub.add_parser("ablate", help="comparison sweeps")
    abl_sub = abl.add_subparsers(dest="ablate_command", required=True)
    ai = abl_sub.add_parser("inject", help="sweep injection schedules")
    _add_common(ai)
    ai.add_argument("--schedules", default="none;1;3,4", help="semicolon-separated schedules")
    ai.set_defaults(func=cmd_ablate_inject)
    aq = abl_sub.add_parser("queries", help="sweep query counts")
    _add_common(aq)
    aq.add_argument("--counts", default="1,3,5,7", help="comma-separated query counts")
    aq.set_defaults(func=cmd_ablate_queries)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AvsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
