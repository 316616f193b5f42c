"""One-hot attention signals that seed the top-down pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError

STRATEGIES = ("gt", "top1", "threshold")
IGNORE = 255


@dataclass
class AttentionSignal:
    """``d`` is an (A, K) 0/1 array with at most one foreground bit per unit."""

    d: np.ndarray

    @property
    def active(self) -> List[Tuple[int, int]]:
        units, classes = np.nonzero(self.d)
        return list(zip(units.tolist(), classes.tolist()))

    def __len__(self) -> int:
        return int(self.d.sum())


def _from_labels(labels: np.ndarray, k: int) -> AttentionSignal:
    d = np.zeros((len(labels), k), dtype=np.uint8)
    on = np.flatnonzero((labels > 0) & (labels < k))
    d[on, labels[on]] = 1
    return AttentionSignal(d)


def init_ground_truth(t: Sequence[int], k: int) -> AttentionSignal:
    t = np.asarray(t, dtype=np.int64)
    if np.any((t != IGNORE) & ((t < 0) | (t >= k))):
        raise InvalidInputError("target label out of range")
    return _from_labels(t, k)


def _as_probs(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2:
        raise InvalidInputError(f"expected (A, K) scores, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("scores must be finite")
    return s


def init_top1(probs) -> AttentionSignal:
    """Activate each unit at its argmax class (lowest index on ties) unless that is background."""
    p = _as_probs(probs)
    return _from_labels(p.argmax(axis=1), p.shape[1])


def init_threshold(probs, theta_attention: float = 0.9) -> AttentionSignal:
    if not 0.0 < theta_attention < 1.0:
        raise InvalidInputError("theta_attention must lie in (0, 1)")
    p = _as_probs(probs)
    labels = p.argmax(axis=1)
    labels[p.max(axis=1) <= theta_attention] = 0
    return _from_labels(labels, p.shape[1])


def init_attention(
    strategy: str,
    probs: Optional[np.ndarray] = None,
    targets: Optional[np.ndarray] = None,
    k: Optional[int] = None,
    theta_attention: float = 0.9,
) -> AttentionSignal:
    """Dispatch on ``strategy``; ``probs`` are per-unit softmax probabilities (A, K)."""
    if strategy == "gt":
        if targets is None or k is None:
            raise InvalidInputError("ground-truth initialisation needs targets and K")
        return init_ground_truth(targets, k)
    if probs is None:
        raise InvalidInputError(f"{strategy} initialisation needs score probabilities")
    if strategy == "top1":
        return init_top1(probs)
    if strategy == "threshold":
        return init_threshold(probs, theta_attention)
    raise InvalidInputError(f"unknown initialisation strategy {strategy!r}")
