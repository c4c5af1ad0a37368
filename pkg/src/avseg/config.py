"""Run configuration: typed INI files with strict key checking.

Precedence is defaults < config file < explicit overrides. Overrides use
dotted ``section.key`` names exactly as they appear in the file, so the CLI
can forward ``--set`` flags without owning any schema knowledge. A config can
be rendered back to canonical INI text; the round trip is exact, which lets a
checkpoint embed the precise configuration it was trained under.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

from .backbone import N_STAGES, InjectionSchedule
from .errors import ConfigError
from .losses import LossWeights
from .scenes import DatasetSpec

__all__ = ["RunConfig", "load_config", "load_config_text", "canonical_dump"]


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {text!r}") from exc


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {text!r}") from exc


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError("expected a comma separated list of integers")
    return tuple(_parse_int(p) for p in parts)


def _parse_str(text: str) -> str:
    return text.strip()


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    # data
    image_size: int = 64
    n_classes: int = 4
    duration_s: float = 1.0
    train_per_scenario: int = 80
    val_per_scenario: int = 20
    # model
    d_model: int = 64
    n_queries: int = 5
    patch: int = 2
    widths: tuple = (32, 64, 128, 160)
    depths: tuple = (1, 1, 2, 1)
    n_heads: int = 2
    query_blocks: int = 2
    query_heads: int = 2
    n_mels: int = 32
    gamma: float = 1.0
    inject: str = "3,4"
    # bank
    bank_path: str = ""
    modes_per_class: int = 2
    nearest_per_mode: int = 3
    centroid_rows: bool = False
    # optim
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    steps: int = 500
    # loss
    w_ce: float = 1.0
    w_focal: float = 0.0
    w_dice: float = 1.0
    w_iou: float = 1.0
    w_contrast: float = 0.1
    tau: float = 0.07
    # log
    eval_per_scenario: int = 2
    checkpoint_every: int = 0

    def __post_init__(self):
        if len(self.widths) != N_STAGES or len(self.depths) != N_STAGES:
            raise ConfigError(f"model widths and depths must each list {N_STAGES} stages")
        if self.n_queries < 1:
            raise ConfigError("n_queries must be positive")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if self.image_size % self.patch != 0:
            raise ConfigError("patch must divide image_size")
        self.injection()  # validates stage indices against widths
        self.dataset_spec()
        self.loss_weights()

    def injection(self) -> InjectionSchedule:
        try:
            return InjectionSchedule.parse(self.inject)
        except Exception as exc:
            raise ConfigError(f"bad injection schedule {self.inject!r}: {exc}") from exc

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            image_size=self.image_size,
            n_classes=self.n_classes,
            duration_s=self.duration_s,
            train_per_scenario=self.train_per_scenario,
            val_per_scenario=self.val_per_scenario,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            ce=self.w_ce,
            focal=self.w_focal,
            dice=self.w_dice,
            iou=self.w_iou,
            contrast=self.w_contrast,
        )


# (section, key in file) -> (attribute, parser)
_SCHEMA: dict[tuple[str, str], tuple[str, object]] = {
    ("run", "seed"): ("seed", _parse_int),
    ("run", "out_dir"): ("out_dir", _parse_str),
    ("data", "image_size"): ("image_size", _parse_int),
    ("data", "n_classes"): ("n_classes", _parse_int),
    ("data", "duration_s"): ("duration_s", _parse_float),
    ("data", "train_per_scenario"): ("train_per_scenario", _parse_int),
    ("data", "val_per_scenario"): ("val_per_scenario", _parse_int),
    ("model", "d_model"): ("d_model", _parse_int),
    ("model", "n_queries"): ("n_queries", _parse_int),
    ("model", "patch"): ("patch", _parse_int),
    ("model", "widths"): ("widths", _parse_ints),
    ("model", "depths"): ("depths", _parse_ints),
    ("model", "n_heads"): ("n_heads", _parse_int),
    ("model", "query_blocks"): ("query_blocks", _parse_int),
    ("model", "query_heads"): ("query_heads", _parse_int),
    ("model", "n_mels"): ("n_mels", _parse_int),
    ("model", "gamma"): ("gamma", _parse_float),
    ("model", "inject"): ("inject", _parse_str),
    ("bank", "path"): ("bank_path", _parse_str),
    ("bank", "modes_per_class"): ("modes_per_class", _parse_int),
    ("bank", "nearest_per_mode"): ("nearest_per_mode", _parse_int),
    ("bank", "centroid_rows"): ("centroid_rows", _parse_bool),
    ("optim", "lr"): ("lr", _parse_float),
    ("optim", "weight_decay"): ("weight_decay", _parse_float),
    ("optim", "batch_size"): ("batch_size", _parse_int),
    ("optim", "steps"): ("steps", _parse_int),
    ("loss", "ce"): ("w_ce", _parse_float),
    ("loss", "focal"): ("w_focal", _parse_float),
    ("loss", "dice"): ("w_dice", _parse_float),
    ("loss", "iou"): ("w_iou", _parse_float),
    ("loss", "contrast"): ("w_contrast", _parse_float),
    ("loss", "tau"): ("tau", _parse_float),
    ("log", "eval_per_scenario"): ("eval_per_scenario", _parse_int),
    ("log", "checkpoint_every"): ("checkpoint_every", _parse_int),
}

_ATTR_TO_KEY = {attr: sk for sk, (attr, _) in _SCHEMA.items()}


def _apply(values: dict, section: str, key: str, raw: str) -> None:
    entry = _SCHEMA.get((section, key))
    if entry is None:
        raise ConfigError(f"unknown config option [{section}] {key}")
    attr, parse = entry
    values[attr] = parse(raw)


def _finish(values: dict, overrides: dict | None) -> RunConfig:
    for dotted, raw in (overrides or {}).items():
        if dotted.count(".") != 1:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".")
        _apply(values, section, key, str(raw))
    try:
        return RunConfig(**values)
    except TypeError as exc:  # unreachable via _SCHEMA, guards direct misuse
        raise ConfigError(str(exc)) from exc


def _collect(parser: configparser.ConfigParser) -> dict:
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(values, section, key, raw)
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a config from defaults, then a file, then dotted overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        values = _collect(parser)
    return _finish(values, overrides)


def load_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Same as load_config but from INI text (checkpoint snapshots)."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config text: {exc}") from exc
    return _finish(_collect(parser), overrides)


def canonical_dump(cfg: RunConfig) -> str:
    """Render a config as INI text; load_config of the result is identical."""
    parser = configparser.ConfigParser(interpolation=None)
    for field in fields(RunConfig):
        section, key = _ATTR_TO_KEY[field.name]
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, _render(getattr(cfg, field.name)))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
