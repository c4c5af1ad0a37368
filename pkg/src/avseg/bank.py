"""Prototype memory bank: per-class k-means modes backed by real embeddings.

The bank is built once from clean per-class audio embeddings and then frozen.
For each class, k-means++ finds ``k_per_class`` modes; for every mode the
``m_nearest`` actual embeddings (by Euclidean distance to the centroid) become
bank rows, so each row is a real observed embedding, not an average. Rows are
ordered class id ascending, then cluster index, then distance ascending.

Serialized as a little-endian container: magic ``DAVB``, u32 version, u32 row
count, u32 width, u32 class count, one u32 class id per row, then the row data
as raw float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import InsufficientDataError, ParameterError, ShapeError

__all__ = [
    "KMeansResult",
    "kmeans_pp",
    "EmbeddingSet",
    "PrototypeBank",
    "build_bank",
    "save_bank",
    "load_bank",
    "bank_summary",
]

BANK_MAGIC = b"DAVB"
BANK_VERSION = 1


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,) int
    inertia: float
    iterations: int


def kmeans_pp(
    points: np.ndarray,
    k: int,
    seed=0,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ (D^2) seeding, deterministic per seed.

    Empty clusters are reseeded to the point currently farthest from its own
    centroid, which keeps the objective non-increasing. Ties in assignment go
    to the lowest cluster index.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"points must be (n, d), got shape {pts.shape}")
    if k < 1:
        raise ParameterError("k must be at least 1")
    if max_iters < 1:
        raise ParameterError("max_iters must be at least 1")
    n = pts.shape[0]
    if n < k:
        raise InsufficientDataError(f"need at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(pts, k, rng)

    assignments = np.zeros(n, dtype=np.int64)
    iterations = 0
    for iterations in range(1, max_iters + 1):
        d2 = _sq_dists(pts, centroids)
        assignments = d2.argmin(axis=1)

        counts = np.bincount(assignments, minlength=k)
        if (counts == 0).any():
            own = d2[np.arange(n), assignments]
            taken: set[int] = set()
            for j in np.flatnonzero(counts == 0):
                order = np.argsort(-own, kind="stable")
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                centroids[j] = pts[idx]
                assignments[idx] = j
                own[idx] = 0.0

        new_centroids = np.stack(
            [pts[assignments == j].mean(axis=0) for j in range(k)]
        )
        shift = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if shift < tol:
            break

    d2 = _sq_dists(pts, centroids)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assignments].sum())
    return KMeansResult(centroids, assignments, inertia, iterations)


def _plusplus_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = pts.shape[0]
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(n))]
    closest = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))  # all remaining points coincide
        centroids[j] = pts[idx]
        closest = np.minimum(closest, ((pts - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _sq_dists(pts: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = pts[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=2)


@dataclass
class EmbeddingSet:
    """All clean embeddings observed for one sound class."""

    class_id: int
    embeddings: np.ndarray  # (n_c, d)


@dataclass
class PrototypeBank:
    prototypes: np.ndarray  # (P, d) float64, frozen
    class_ids: np.ndarray  # (P,) int, parallel to rows

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.prototypes.ndim != 2:
            raise ShapeError("prototypes must be (P, d)")
        if self.class_ids.shape != (self.prototypes.shape[0],):
            raise ShapeError("one class id per prototype row required")

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def width(self) -> int:
        return self.prototypes.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(set(int(c) for c in self.class_ids))


def build_bank(
    sets: list[EmbeddingSet],
    k_per_class: int = 4,
    m_nearest: int = 3,
    seed: int = 0,
    centroid_rows: bool = False,
) -> PrototypeBank:
    """Cluster each class's embeddings and keep the nearest real rows per mode.

    ``centroid_rows=True`` stores the centroids themselves instead (one row per
    mode), for comparison runs.
    """
    if not sets:
        raise InsufficientDataError("no embedding sets given")
    if m_nearest < 1:
        raise ParameterError("m_nearest must be at least 1")
    seen = [s.class_id for s in sets]
    if len(set(seen)) != len(seen):
        raise ParameterError(f"duplicate class ids in embedding sets: {seen}")

    widths = {np.asarray(s.embeddings).shape[1] for s in sets}
    if len(widths) != 1:
        raise ShapeError(f"embedding widths disagree across classes: {sorted(widths)}")

    rows: list[np.ndarray] = []
    ids: list[int] = []
    for s in sorted(sets, key=lambda s: s.class_id):
        emb = np.asarray(s.embeddings, dtype=np.float64)
        if not centroid_rows and emb.shape[0] < m_nearest:
            raise InsufficientDataError(
                f"class {s.class_id}: {emb.shape[0]} embeddings < m_nearest={m_nearest}"
            )
        km = kmeans_pp(emb, k_per_class, seed=[seed, s.class_id])
        for j in range(k_per_class):
            if centroid_rows:
                rows.append(km.centroids[j])
                ids.append(s.class_id)
                continue
            dists = np.linalg.norm(emb - km.centroids[j], axis=1)
            order = np.argsort(dists, kind="stable")[:m_nearest]
            for idx in order:
                rows.append(emb[idx])
                ids.append(s.class_id)
    return PrototypeBank(np.stack(rows), np.asarray(ids))


def save_bank(path, bank: PrototypeBank) -> None:
    with open(path, "wb") as f:
        binio.write_header(f, BANK_MAGIC, BANK_VERSION)
        binio.write_u32(f, bank.size)
        binio.write_u32(f, bank.width)
        binio.write_u32(f, len(bank.classes))
        for cid in bank.class_ids:
            binio.write_u32(f, int(cid))
        f.write(np.ascontiguousarray(bank.prototypes, dtype="<f8").tobytes())


def load_bank(path) -> PrototypeBank:
    with open(path, "rb") as f:
        binio.read_header(f, BANK_MAGIC, BANK_VERSION)
        size = binio.read_u32(f)
        width = binio.read_u32(f)
        binio.read_u32(f)  # class count, derivable; kept for inspectability
        class_ids = np.array([binio.read_u32(f) for _ in range(size)], dtype=np.int64)
        raw = binio.read_exact(f, 8 * size * width)
        prototypes = np.frombuffer(raw, dtype="<f8").reshape(size, width).astype(np.float64)
    return PrototypeBank(prototypes, class_ids)


def bank_summary(bank: PrototypeBank) -> dict:
    per_class = {c: int((bank.class_ids == c).sum()) for c in bank.classes}
    norms = np.linalg.norm(bank.prototypes, axis=1)
    return {
        "rows": bank.size,
        "width": bank.width,
        "classes": bank.classes,
        "rows_per_class": per_class,
        "row_norm_min": float(norms.min()) if bank.size else 0.0,
        "row_norm_max": float(norms.max()) if bank.size else 0.0,
    }
