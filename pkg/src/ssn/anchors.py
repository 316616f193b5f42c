"""Anchor boxes, IoU target assignment, target sampling and the two loss heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, add, mul, nll_loss
from .errors import InvalidInputError

IGNORE = 255


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in input pixels, half-open: [x0, x1) x [y0, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise InvalidInputError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class LossConfig:
    alpha_loss: float = 1.0
    theta_pos: float = 0.5
    theta_neg: float = 0.3
    max_targets: int = 128
    neg_ratio: int = 3

    def __post_init__(self):
        if not self.theta_neg < self.theta_pos:
            raise InvalidInputError("theta_neg must be below theta_pos")
        if self.max_targets < 1 or self.neg_ratio < 0 or self.alpha_loss < 0:
            raise InvalidInputError("invalid loss configuration")


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets (Box lists or (n, 4) arrays)."""
    a, b = _as_array(a), _as_array(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def assign_targets(anchors, gt: Sequence[Tuple[Box, int]], cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-anchor labels: class, background (0) or don't-care (255).

    After thresholding, each ground-truth box forces its best-overlapping
    anchor (first on ties) to its class; later boxes override earlier ones.
    """
    a = _as_array(anchors)
    if len(a) == 0:
        raise InvalidInputError("assign_targets needs at least one anchor")
    t = np.zeros(len(a), dtype=np.int64)
    if not gt:
        return t
    classes = np.array([c for _, c in gt], dtype=np.int64)
    m = iou_matrix(a, [b for b, _ in gt])
    best = m.argmax(axis=1)
    best_iou = m[np.arange(len(a)), best]
    t[:] = IGNORE
    pos = best_iou > cfg.theta_pos
    t[pos] = classes[best[pos]]
    t[best_iou < cfg.theta_neg] = 0
    for j in range(len(gt)):
        i = int(m[:, j].argmax())
        if m[i, j] > 0:
            t[i] = classes[j]
    return t


def sample_targets(t: np.ndarray, rng: Union[int, np.random.Generator], cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Randomly keep a bounded, ratio-capped subset of labels; the rest become 255."""
    rng = np.random.default_rng(rng)
    t = np.asarray(t)
    out = np.full_like(t, IGNORE)
    pos = np.flatnonzero((t != 0) & (t != IGNORE))
    neg = np.flatnonzero(t == 0)
    if len(pos) > cfg.max_targets:
        pos = np.sort(rng.choice(pos, cfg.max_targets, replace=False))
    n_neg = cfg.max_targets - len(pos)
    if len(pos):
        n_neg = min(n_neg, cfg.neg_ratio * len(pos))
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, n_neg, replace=False))
    out[pos] = t[pos]
    out[neg] = 0
    return out


def lsd_loss(scores, t: np.ndarray) -> Tensor:
    """Mean NLL over all non-ignored units of every group; ``t`` is (N, A)."""
    planes = scores.split_targets(t)
    count = sum(int((p != IGNORE).sum()) for p in planes)
    if count == 0:
        return Tensor(0.0)
    total = None
    for m, p in zip(scores.maps, planes):
        if not (p != IGNORE).any():
            continue
        term = nll_loss(m, p, IGNORE, reduction="sum")
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / count)


def seg_loss(o: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if o.shape[:1] + o.shape[2:] != mask.shape:
        raise InvalidInputError(f"score map {o.shape} does not match mask {mask.shape}")
    return nll_loss(o, mask, IGNORE)


def total_loss(l_d, l_s, alpha_loss: float = 1.0):
    if isinstance(l_d, Tensor) or isinstance(l_s, Tensor):
        if alpha_loss == 0:
            return l_d if isinstance(l_d, Tensor) else Tensor(float(l_d))
        return add(l_d if isinstance(l_d, Tensor) else Tensor(float(l_d)), mul(l_s, alpha_loss))
    return l_d + alpha_loss * l_s


def targets_for_batch(anchors: np.ndarray, gts: List[Sequence[Tuple[Box, int]]], cfg: LossConfig, rng) -> np.ndarray:
    """Assign then sample targets for each image of a batch; returns (N, A)."""
    rng = np.random.default_rng(rng)
    return np.stack([sample_targets(assign_targets(anchors, gt, cfg), rng, cfg) for gt in gts])
