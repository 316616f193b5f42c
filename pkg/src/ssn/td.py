"""Top-down selection: gating maps traced from attention seeds down the hierarchy.

Each gated node competes over its post-synaptic (PS) activities
``ps_k = w_k * h_k`` in three stages:

1. winners are entries at or above the mean of the positive PS values;
2. winners are grouped into 4-connected spatial components and the
   component maximising ``alpha * size share + (1 - alpha) * activity share``
   is kept (1x1 layers keep only the strongest winner);
3. the kept entries split the parent gate in proportion to their PS values.

Max pooling hands the whole gate to the stored argmax and ReLU passes it
where its input was positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import td_kernels as K
from .attention import AttentionSignal
from .encoder import ActivationTrace, LayerSpec, NetworkSpec
from .errors import InvalidInputError, StateError
from .lsd import LsdSpec

ALPHA_TD = 0.2


# stage API -------------------------------------------------------------------------


@dataclass
class PSField:
    """PS activities of one gated node with the input coordinates of each contributor."""

    ps: np.ndarray
    channel: np.ndarray
    y: np.ndarray
    x: np.ndarray

    @property
    def flat(self) -> np.ndarray:
        return np.stack([self.channel, self.y, self.x], axis=1)


def psfield(layer: LayerSpec, weight: np.ndarray, h_below: np.ndarray, node: Tuple[int, int, int]) -> PSField:
    """PS field of output node ``(channel, y, x)``; ``h_below`` is the (C, H, W) layer input."""
    if not layer.is_conv:
        raise InvalidInputError("PS fields are defined for convolution layers only")
    co, oy, ox = node
    ps, flat, ys, xs = K.node_psfield(
        np.ascontiguousarray(h_below, dtype=np.float64),
        np.ascontiguousarray(weight, dtype=np.float64),
        co, oy, ox, layer.stride, layer.pad, layer.dilation,
    )
    hh, ww = h_below.shape[1:]
    return PSField(ps, flat // (hh * ww), ys, xs)


def stage1_competition(ps: Sequence[float]) -> np.ndarray:
    """Indices of winners: ps >= mean of the strictly positive entries."""
    return K.stage1(np.asarray(ps, dtype=np.float64))


def stage2_group_select_conv(
    ps: Sequence[float], ys: Sequence[int], xs: Sequence[int], winners: Sequence[int], alpha: float = ALPHA_TD
) -> np.ndarray:
    winners = np.asarray(winners, dtype=np.int64)
    if len(winners) == 0:
        raise InvalidInputError("stage 2 needs at least one winner")
    return K.stage2_select(
        np.asarray(ps, dtype=np.float64),
        np.asarray(ys, dtype=np.int64),
        np.asarray(xs, dtype=np.int64),
        winners,
        float(alpha),
    )


def stage2_wta_collapsed(ps: Sequence[float], winners: Sequence[int]) -> np.ndarray:
    winners = np.asarray(winners, dtype=np.int64)
    if len(winners) == 0:
        raise InvalidInputError("stage 2 needs at least one winner")
    return K.stage2_wta(np.asarray(ps, dtype=np.float64), winners)


def stage3_normalize_propagate(
    selected: Sequence[int],
    ps: Sequence[float],
    parent_gate: float,
    g_below: Optional[np.ndarray] = None,
    targets: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Contributions ``parent_gate * ps_k / sum(selected ps)``.

    With ``g_below`` and flat ``targets`` (one per PS entry) the
    contributions are also added into ``g_below`` in place.
    """
    if parent_gate <= 0:
        raise InvalidInputError("parent gate must be positive")
    selected = np.asarray(selected, dtype=np.int64)
    if len(selected) == 0:
        raise InvalidInputError("stage 3 needs a non-empty selection")
    q = K.stage3_weights(np.asarray(ps, dtype=np.float64), selected)
    contrib = parent_gate * q
    if g_below is not None:
        flat = g_below.reshape(-1)
        for j, k in enumerate(selected):
            flat[targets[k]] += contrib[j]
    return contrib


# layer kernels ---------------------------------------------------------------------


@dataclass
class Entries:
    """Sparse per-seed gating at one layer: parallel arrays sorted by (seed, idx)."""

    seed: np.ndarray
    idx: np.ndarray
    val: np.ndarray

    @classmethod
    def empty(cls) -> "Entries":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))

    def __len__(self) -> int:
        return len(self.idx)

    def dense(self, shape: Tuple[int, ...]) -> np.ndarray:
        # per-seed values lie on a 2**-40 grid, so this sum is exact in any order
        return np.bincount(self.idx, weights=self.val, minlength=int(np.prod(shape))).reshape(shape)


def _layer_entries(
    layer: LayerSpec,
    e: Entries,
    h_below: np.ndarray,
    out_shape: Tuple[int, int, int],
    weight: Optional[np.ndarray],
    argmax: Optional[np.ndarray],
    alpha: float,
) -> Entries:
    if len(e) == 0:
        return Entries.empty()
    if layer.kind == "relu":
        keep = h_below.reshape(-1)[e.idx] > 0
        return Entries(e.seed[keep], e.idx[keep], e.val[keep])
    if layer.kind == "maxpool":
        if argmax is None:
            raise StateError(f"missing argmax indices for pooling layer {layer.name}")
        s, i, v = K.pool_td(e.seed, e.idx, e.val, np.ascontiguousarray(argmax, dtype=np.int64), h_below.shape[1:])
        return Entries(s, i, v)
    if weight is None:
        raise InvalidInputError(f"missing kernel for layer {layer.name}")
    s, i, v = K.conv_td(
        e.seed, e.idx, e.val,
        np.ascontiguousarray(h_below, dtype=np.float64),
        np.ascontiguousarray(weight, dtype=np.float64),
        layer.stride, layer.pad, layer.dilation, float(alpha),
        layer.kind == "collapsed", out_shape[1:],
    )
    return Entries(s, i, v)


def td_layer(
    layer: LayerSpec,
    g_above: np.ndarray,
    h_below: np.ndarray,
    kernel: Optional[np.ndarray] = None,
    argmax: Optional[np.ndarray] = None,
    alpha: float = ALPHA_TD,
) -> np.ndarray:
    """Gating at a layer's input from gating at its output; arrays are (C, H, W)."""
    g_above = np.asarray(g_above, dtype=np.float64)
    if np.any(g_above < 0):
        raise InvalidInputError("gating must be non-negative")
    idx = np.flatnonzero(g_above.reshape(-1))
    e = Entries(np.zeros(len(idx), np.int64), idx.astype(np.int64), g_above.reshape(-1)[idx])
    out = _layer_entries(layer, e, np.asarray(h_below, dtype=np.float64), g_above.shape, kernel, argmax, alpha)
    return out.dense(h_below.shape)


# full pass -------------------------------------------------------------------------


@dataclass
class GatingTrace:
    """Per-layer gating maps g_i (C, H, W) keyed by layer name; missing layers are all zero."""

    maps: Dict[str, np.ndarray] = field(default_factory=dict)
    shapes: Dict[str, Tuple[int, int, int]] = field(default_factory=dict)
    alpha_td: float = ALPHA_TD
    seeds: List[Tuple[int, int]] = field(default_factory=list)

    def get(self, name: str) -> np.ndarray:
        if name in self.maps:
            return self.maps[name]
        if name in self.shapes:
            return np.zeros(self.shapes[name])
        raise InvalidInputError(f"no gating shape known for layer {name!r}")

    def mass(self, name: str) -> float:
        return float(self.get(name).sum())


def _weight(weights: Mapping, prefix: str, layer: LayerSpec) -> Optional[np.ndarray]:
    if not layer.is_conv:
        return None
    w = weights.get(f"{prefix}{layer.name}.weight")
    if w is None:
        raise InvalidInputError(f"missing weights for layer {prefix}{layer.name}")
    return getattr(w, "data", w)


def _step(layer, e, trace: ActivationTrace, n, weights, prefix, alpha) -> Entries:
    h_below = trace.input(layer.name).data[n]
    out_shape = trace.output(layer.name).shape[1:]
    argmax = trace.pool_indices(layer.name)[n] if layer.kind == "maxpool" else None
    return _layer_entries(layer, e, h_below, out_shape, _weight(weights, prefix, layer), argmax, alpha)


def td_pass(
    d: AttentionSignal,
    bu_trace: ActivationTrace,
    lsd_trace: ActivationTrace,
    network: NetworkSpec,
    lsd: LsdSpec,
    weights: Mapping,
    n: int = 0,
    stop: Optional[str] = None,
    alpha: float = ALPHA_TD,
    bu_prefix: str = "bu.",
    lsd_prefix: str = "lsd.",
    record_lsd: bool = False,
) -> GatingTrace:
    """Trace gating for image ``n`` from the active (unit, class) seeds of ``d``.

    Every seed starts with gate 1 at its LSD prediction unit. Gating is
    recorded at every BU layer output from the LSD tap down to ``stop``
    (default: the network's stop layer).
    """
    stop = stop or network.stop
    tap = network.taps.get("lsd")
    if tap is None or stop is None:
        raise InvalidInputError("network needs an LSD tap and a stop layer")
    lo, hi = network.index(stop), network.index(tap)
    if lo > hi:
        raise InvalidInputError("stop layer lies above the LSD tap")

    shapes = {l.name: bu_trace.output(l.name).shape[1:] for l in network.layers[lo : hi + 1]}
    if record_lsd:
        shapes.update({name: lsd_trace.output(name).shape[1:] for name in lsd_trace.names()})
    gt = GatingTrace(shapes=shapes, alpha_td=alpha, seeds=d.active)

    pred_shapes = [lsd_trace.output(g.pred.name).shape[2:] for g in lsd.groups]
    offsets = np.concatenate([[0], np.cumsum([h * w for h, w in pred_shapes])]).astype(int)
    per_group: List[List[Tuple[int, int, int]]] = [[] for _ in lsd.groups]
    for s, (unit, cls) in enumerate(d.active):
        g = int(np.searchsorted(offsets, unit, side="right") - 1)
        if g >= len(lsd.groups):
            raise InvalidInputError(f"attention unit {unit} out of range")
        hw = pred_shapes[g][0] * pred_shapes[g][1]
        per_group[g].append((s, cls * hw + (unit - offsets[g])))

    # LSD: each group's seeds descend through its own path down to h
    at_h: List[Entries] = []
    recorded: Dict[str, List[Entries]] = {}
    for g, path in zip(lsd.groups, lsd.group_paths()):
        if not per_group[g.index]:
            continue
        seeds = np.array([s for s, _ in per_group[g.index]], dtype=np.int64)
        idx = np.array([i for _, i in per_group[g.index]], dtype=np.int64)
        e = Entries(seeds, idx, np.ones(len(idx)))
        for layer in reversed(path):
            if record_lsd:
                recorded.setdefault(layer.name, []).append(e)
            e = _step(layer, e, lsd_trace, n, weights, lsd_prefix, alpha)
        at_h.append(e)

    if at_h:
        e = Entries(*(np.concatenate([getattr(x, f) for x in at_h]) for f in ("seed", "idx", "val")))
        order = np.lexsort((e.idx, e.seed))
        e = Entries(e.seed[order], e.idx[order], e.val[order])
    else:
        e = Entries.empty()

    for layer in reversed(network.layers[lo : hi + 1]):
        if len(e):
            gt.maps[layer.name] = e.dense(shapes[layer.name])
        if layer.name == stop:
            break
        e = _step(layer, e, bu_trace, n, weights, bu_prefix, alpha)

    for name, parts in recorded.items():
        parts = [p for p in parts if len(p)]
        if parts:
            merged = Entries(*(np.concatenate([getattr(x, f) for x in parts]) for f in ("seed", "idx", "val")))
            gt.maps[name] = merged.dense(shapes[name])
    return gt
