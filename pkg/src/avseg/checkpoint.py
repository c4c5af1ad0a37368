"""Model checkpoints: named float64 arrays plus the run configuration.

Little-endian container: magic ``DAVC``, u32 version, u32 step, the canonical
INI text of the config, then a record per parameter (dotted name string, then
a shape-prefixed float64 array). Records are written in registry insertion
order, so two identical training runs produce byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import ParameterError

__all__ = ["CHECKPOINT_MAGIC", "CHECKPOINT_VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"DAVC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    step: int
    config_text: str
    arrays: dict[str, np.ndarray]  # insertion ordered


def save_checkpoint(path: str, step: int, config_text: str, arrays: dict[str, np.ndarray]) -> None:
    if step < 0:
        raise ParameterError("step must be non-negative")
    with open(path, "wb") as f:
        binio.write_header(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        binio.write_u32(f, step)
        binio.write_string(f, config_text)
        binio.write_u32(f, len(arrays))
        for name, values in arrays.items():
            binio.write_string(f, name)
            binio.write_f64_array(f, values)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        binio.read_header(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        step = binio.read_u32(f)
        config_text = binio.read_string(f)
        count = binio.read_u32(f)
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = binio.read_string(f)
            if name in arrays:
                raise ParameterError(f"duplicate parameter record {name!r}")
            arrays[name] = binio.read_f64_array(f)
    return Checkpoint(step, config_text, arrays)
