"""Lightweight call counters.

A handful of structural tests need to prove that whole branches of the model
never execute (for example, that evaluation never touches the augmentation
chain). Modules bump a named counter at their entry points; tests reset,
exercise a code path, and read the counts back.
"""

from __future__ import annotations

from collections import Counter

__all__ = ["bump", "get", "reset", "snapshot"]

_counts: Counter[str] = Counter()


def bump(name: str, n: int = 1) -> None:
    _counts[name] += n


def get(name: str) -> int:
    return _counts.get(name, 0)


def reset() -> None:
    _counts.clear()


def snapshot() -> dict[str, int]:
    """Current counts as a plain dict (copy, safe to keep around)."""
    return dict(_counts)
