"""Synthetic sounding-shapes benchmark scenes.

Each scene is a textured background with 1-3 anti-aliased geometric shapes.
Every sound class owns one canonical shape and color (circle/red, square/green,
triangle/blue, diamond/yellow), so the visual identity of a class is stable
across the dataset. The waveform is the peak-normalized mixture of the
signatures of all sounding sources; the ground-truth mask is the union of the
pixels of sources that are both sounding and on screen.

Five scenario families cover the interesting failure modes:

* ``single``: one sounding shape
* ``multi_class``: 2-3 shapes of different classes, exactly one sounding
* ``multi_instance``: 2-3 shapes of one class, all sounding
* ``small_distant``: one sounding shape scaled to at most 2% of the frame
* ``off_screen``: silent distractor shapes; the audible class has no shape,
  so the correct mask is empty

Scenes are deterministic per (scenario, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import NUM_CLASSES, Waveform, synth_waveform
from .errors import ParameterError

__all__ = [
    "SCENARIOS",
    "CLASS_STYLES",
    "ShapeSpec",
    "SceneSource",
    "Scene",
    "DatasetSpec",
    "generate_scene",
    "make_split",
]

SCENARIOS = ("single", "multi_class", "multi_instance", "small_distant", "off_screen")

# class id -> (shape kind, RGB color)
CLASS_STYLES: tuple[tuple[str, tuple[float, float, float]], ...] = (
    ("circle", (0.85, 0.15, 0.15)),
    ("square", (0.15, 0.78, 0.20)),
    ("triangle", (0.20, 0.32, 0.85)),
    ("diamond", (0.90, 0.84, 0.15)),
)

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    cx: float
    cy: float
    radius: float  # circumscribed radius; shapes fit in a 2r box


@dataclass
class SceneSource:
    class_id: int
    shape: ShapeSpec | None  # None when the emitter is off screen
    is_sounding: bool
    on_screen: bool
    audio_seed: int


@dataclass
class Scene:
    scenario: str
    image: np.ndarray  # (H, W, 3) in [0, 1]
    waveform: Waveform
    gt_mask: np.ndarray  # (H, W) bool
    sources: list[SceneSource] = field(repr=False)


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 64
    n_classes: int = 4
    duration_s: float = 1.0
    train_per_scenario: int = 80
    val_per_scenario: int = 20

    def __post_init__(self):
        if not 1 <= self.n_classes <= NUM_CLASSES:
            raise ParameterError(f"n_classes must be in [1, {NUM_CLASSES}]")
        if self.image_size < 16:
            raise ParameterError("image_size must be at least 16")


def _coverage(shape: ShapeSpec, size: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape, via subpixel sampling."""
    ss = _SUPERSAMPLE
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xx - shape.cx, yy - shape.cy
    r = shape.radius
    if shape.kind == "circle":
        inside = dx * dx + dy * dy <= r * r
    elif shape.kind == "square":
        half = r / np.sqrt(2.0)  # same circumscribed radius as the circle
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif shape.kind == "triangle":
        # equilateral, apex up, circumscribed radius r, centroid at (cx, cy)
        slope = np.sqrt(3.0)
        inside = (dy <= r / 2.0) & (dy >= slope * dx - r) & (dy >= -slope * dx - r)
    elif shape.kind == "diamond":
        inside = np.abs(dx) + np.abs(dy) <= r
    else:
        raise ParameterError(f"unknown shape kind {shape.kind!r}")
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.55)
    coords = np.arange(size) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    fx, fy = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    sweep = 0.05 * np.sin(2 * np.pi * fx * xx + phase[0]) * np.sin(2 * np.pi * fy * yy + phase[1])
    grain = 0.02 * rng.standard_normal((size, size))
    gray = np.clip(base + sweep + grain, 0.0, 1.0)
    return np.repeat(gray[:, :, None], 3, axis=2)


def _place_shapes(
    rng: np.random.Generator, size: int, radii: list[float]
) -> list[tuple[float, float]]:
    """Non-overlapping center placement by rejection; radii shrink if cramped."""
    centers: list[tuple[float, float]] = []
    for i in range(len(radii)):
        placed = False
        while not placed:
            r = radii[i]
            for _ in range(200):
                margin = r + 1.5
                cx = rng.uniform(margin, size - margin)
                cy = rng.uniform(margin, size - margin)
                ok = all(
                    (cx - ox) ** 2 + (cy - oy) ** 2 >= (r + radii[j] + 2.0) ** 2
                    for j, (ox, oy) in enumerate(centers)
                )
                if ok:
                    centers.append((cx, cy))
                    placed = True
                    break
            else:
                # cramped layout: shrink and keep trying, overlap stays forbidden
                radii[i] = r * 0.6
    return centers


def generate_scene(
    scenario: str,
    seed,
    image_size: int = 64,
    n_classes: int = 4,
    duration_s: float = 1.0,
) -> Scene:
    if scenario not in SCENARIOS:
        raise ParameterError(f"unknown scenario {scenario!r}, expected one of {SCENARIOS}")
    if not 1 <= n_classes <= NUM_CLASSES:
        raise ParameterError(f"n_classes must be in [1, {NUM_CLASSES}]")
    rng = np.random.default_rng(seed)
    size = image_size
    scale = size / 64.0  # radius ranges are stated for a 64 px canvas

    # decide classes, radii, and which sources sound
    if scenario == "single":
        classes = [int(rng.integers(n_classes))]
        radii = [rng.uniform(11.0, 20.0) * scale]
        sounding = [True]
        off_screen_class = None
    elif scenario == "multi_class":
        count = int(rng.integers(2, min(3, n_classes) + 1)) if n_classes >= 2 else 1
        classes = [int(c) for c in rng.choice(n_classes, size=count, replace=False)]
        radii = [rng.uniform(8.0, 13.0) * scale for _ in classes]
        loud = int(rng.integers(count))
        sounding = [i == loud for i in range(count)]
        off_screen_class = None
    elif scenario == "multi_instance":
        cls = int(rng.integers(n_classes))
        count = int(rng.integers(2, 4))
        classes = [cls] * count
        radii = [rng.uniform(7.0, 11.0) * scale for _ in classes]
        sounding = [True] * count
        off_screen_class = None
    elif scenario == "small_distant":
        classes = [int(rng.integers(n_classes))]
        # area <= 2% of the frame: pi r^2 <= 0.02 * size^2
        r_cap = np.sqrt(0.02 / np.pi) * size
        radii = [rng.uniform(0.6 * r_cap, 0.98 * r_cap)]
        sounding = [True]
        off_screen_class = None
    else:  # off_screen
        count = int(rng.integers(1, 3)) if n_classes >= 2 else 1
        pool = rng.permutation(n_classes)
        off_screen_class = int(pool[0])
        classes = [int(c) for c in pool[1 : 1 + count]]
        radii = [rng.uniform(9.0, 14.0) * scale for _ in classes]
        sounding = [False] * len(classes)

    centers = _place_shapes(rng, size, radii)

    image = _background(rng, size)
    gt = np.zeros((size, size), dtype=bool)
    sources: list[SceneSource] = []
    for cls, (cx, cy), r, snd in zip(classes, centers, radii, sounding):
        kind, color = CLASS_STYLES[cls]
        shape = ShapeSpec(kind, cx, cy, r)
        alpha = _coverage(shape, size)
        image = image * (1.0 - alpha[:, :, None]) + np.asarray(color) * alpha[:, :, None]
        if snd:
            gt |= alpha > 0.5
        sources.append(
            SceneSource(cls, shape, snd, on_screen=True, audio_seed=int(rng.integers(2**31)))
        )
    if off_screen_class is not None:
        sources.append(
            SceneSource(
                off_screen_class, None, True, on_screen=False, audio_seed=int(rng.integers(2**31))
            )
        )

    mix = np.zeros(int(round(duration_s * 16000)))
    for src in sources:
        if src.is_sounding:
            mix = mix + synth_waveform(src.class_id, seed=src.audio_seed, duration_s=duration_s).samples
    peak = np.abs(mix).max()
    if peak > 0:
        mix = mix / peak

    return Scene(scenario, np.clip(image, 0.0, 1.0), Waveform(mix), gt, sources)


def make_split(spec: DatasetSpec, split: str, master_seed: int) -> list[Scene]:
    """All scenes of one split, scenario-balanced, deterministic per seed."""
    if split == "train":
        split_id, per = 0, spec.train_per_scenario
    elif split == "val":
        split_id, per = 1, spec.val_per_scenario
    else:
        raise ParameterError(f"unknown split {split!r}")
    scenes = []
    for s_idx, scenario in enumerate(SCENARIOS):
        for i in range(per):
            scenes.append(
                generate_scene(
                    scenario,
                    seed=[master_seed, split_id, s_idx, i],
                    image_size=spec.image_size,
                    n_classes=spec.n_classes,
                    duration_s=spec.duration_s,
                )
            )
    return scenes
