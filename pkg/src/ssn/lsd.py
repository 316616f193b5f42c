"""Loose spatial detection: multi-scale class score maps over the top BU activation."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .anchors import Box
from .autodiff import Tensor, softmax_channel
from .encoder import ActivationTrace, LayerSpec, RFGeometry, apply_layer, init_layer_params, rf_through
from .errors import InvalidInputError

DESIGNS = ("parallel", "sequential")

_COMPACT = re.compile(r"^([cm])(\d+)x(\d+)((?:-[spd]\d+)*)$")


def parse_compact(token: str, name: str, out_channels: int = 0) -> LayerSpec:
    """Parse ``c3x3-s2-p2-d2`` / ``m3x3-s2`` style layer notation.

    Omitted fields take the defaults s1, p0, d1. Convolutions get
    ``out_channels`` output channels; 1x1 convolutions become collapsed.
    """
    m = _COMPACT.match(token)
    if m is None:
        raise InvalidInputError(f"cannot parse layer token {token!r}")
    op, kh, kw, rest = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
    if kh != kw:
        raise InvalidInputError(f"only square kernels are supported: {token!r}")
    fields = {"s": 1, "p": 0, "d": 1}
    seen = set()
    for part in filter(None, rest.split("-")):
        key = part[0]
        if key in seen:
            raise InvalidInputError(f"repeated field {key!r} in {token!r}")
        seen.add(key)
        fields[key] = int(part[1:])
    if op == "m":
        if fields["d"] != 1:
            raise InvalidInputError(f"pooling cannot be dilated: {token!r}")
        return LayerSpec("maxpool", name, 0, kh, fields["s"], fields["p"], 1)
    kind = "collapsed" if kh == 1 else "conv"
    return LayerSpec(kind, name, out_channels, kh, fields["s"], fields["p"], fields["d"])


def format_compact(layer: LayerSpec) -> str:
    if layer.kind == "relu":
        raise InvalidInputError("relu layers have no compact notation")
    op = "m" if layer.kind == "maxpool" else "c"
    parts = [f"{op}{layer.k}x{layer.k}"]
    if layer.stride != 1:
        parts.append(f"s{layer.stride}")
    if layer.pad != 0:
        parts.append(f"p{layer.pad}")
    if layer.dilation != 1:
        parts.append(f"d{layer.dilation}")
    return "-".join(parts)


@dataclass(frozen=True)
class LsdGroupSpec:
    """One LSD group: intermediate layers (ReLU after each conv) and a prediction conv."""

    index: int
    tokens: Tuple[str, ...]
    layers: Tuple[LayerSpec, ...]
    pred: LayerSpec
    design: str = "parallel"

    @property
    def all_layers(self) -> Tuple[LayerSpec, ...]:
        return self.layers + (self.pred,)


def build_group(
    index: int, tokens: Sequence[str], width: int, classes: int, pred_token: str = "c1x1", design: str = "parallel"
) -> LsdGroupSpec:
    if design not in DESIGNS:
        raise InvalidInputError(f"unknown LSD design {design!r}")
    layers: List[LayerSpec] = []
    for j, tok in enumerate(tokens):
        layer = parse_compact(tok, f"g{index}.{j}", width)
        layers.append(layer)
        if layer.is_conv:
            layers.append(LayerSpec("relu", f"g{index}.{j}r"))
    pred = parse_compact(pred_token, f"g{index}.pred", classes)
    if not pred.is_conv:
        raise InvalidInputError("the LSD prediction layer must be a convolution")
    return LsdGroupSpec(index, tuple(tokens), tuple(layers), pred, design)


@dataclass
class LsdSpec:
    groups: List[LsdGroupSpec]
    classes: int
    width: int
    design: str = "parallel"
    pred_token: str = "c1x1"

    @classmethod
    def from_tokens(
        cls,
        group_tokens: Sequence[Sequence[str]],
        classes: int,
        width: int,
        design: str = "parallel",
        pred_token: str = "c1x1",
    ) -> "LsdSpec":
        if classes < 2:
            raise InvalidInputError("need at least two classes (background plus one)")
        groups = [build_group(i, toks, width, classes, pred_token, design) for i, toks in enumerate(group_tokens)]
        return cls(groups, classes, width, design, pred_token)

    def with_design(self, design: str) -> "LsdSpec":
        return LsdSpec.from_tokens([g.tokens for g in self.groups], self.classes, self.width, design, self.pred_token)

    def group_inputs(self) -> List[Optional[int]]:
        """Index of the group whose intermediates feed each group (None = h)."""
        if self.design == "parallel":
            return [None] * len(self.groups)
        return [None] + list(range(len(self.groups) - 1))

    def group_paths(self) -> List[List[LayerSpec]]:
        """Layers between h and each prediction map, in execution order."""
        paths = []
        for g, src in zip(self.groups, self.group_inputs()):
            prefix = [] if src is None else [l for l in paths[src] if l is not self.groups[src].pred]
            paths.append(prefix + list(g.layers) + [g.pred])
        return paths

    def init_params(self, in_channels: int, rng: np.random.Generator, prefix: str = "lsd.") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for g, src in zip(self.groups, self.group_inputs()):
            c = in_channels if src is None else self._out_channels(self.groups[src], in_channels)
            params.update(init_layer_params(g.all_layers, c, rng, prefix))
        return params

    def _out_channels(self, group: LsdGroupSpec, c: int) -> int:
        for layer in group.layers:
            c = layer.output_channels(c)
        return c


# score maps ---------------------------------------------------------------------


@dataclass
class UnitGeometry:
    group: int
    y: int
    x: int
    rf: RFGeometry
    box: Box


class ScoreMaps:
    """Per-group K-channel score maps plus the flat unit indexing.

    Units are numbered group by group, row-major within each map, so unit
    ``i`` of the flat view ``s`` (N x A x K) is a (group, y, x) triple.
    """

    def __init__(self, maps: List[Tensor], geometry: List[RFGeometry], image_hw: Tuple[int, int]):
        self.maps = maps
        self.geometry = geometry
        self.image_hw = (int(image_hw[0]), int(image_hw[1]))
        self.group_hw = [m.shape[2:] for m in maps]
        counts = [h * w for h, w in self.group_hw]
        self.unit_counts = counts
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)

    @property
    def num_units(self) -> int:
        return int(self.offsets[-1])

    @property
    def classes(self) -> int:
        return self.maps[0].shape[1]

    @property
    def batch(self) -> int:
        return self.maps[0].shape[0]

    def flat(self) -> np.ndarray:
        """Raw scores as an (N, A, K) array."""
        n, k = self.batch, self.classes
        return np.concatenate([m.data.reshape(n, k, -1).transpose(0, 2, 1) for m in self.maps], axis=1)

    def probabilities(self) -> np.ndarray:
        n, k = self.batch, self.classes
        parts = [softmax_channel(Tensor(m.data)).data.reshape(n, k, -1).transpose(0, 2, 1) for m in self.maps]
        return np.concatenate(parts, axis=1)

    def locate(self, unit: int) -> Tuple[int, int, int]:
        if not 0 <= unit < self.num_units:
            raise InvalidInputError(f"unit index {unit} out of range [0, {self.num_units})")
        g = int(np.searchsorted(self.offsets, unit, side="right") - 1)
        local = unit - int(self.offsets[g])
        w = self.group_hw[g][1]
        return g, local // w, local % w

    def unit_index(self, group: int, y: int, x: int) -> int:
        h, w = self.group_hw[group]
        if not (0 <= y < h and 0 <= x < w):
            raise InvalidInputError(f"({y}, {x}) outside group {group} map of size {h}x{w}")
        return int(self.offsets[group]) + y * w + x

    def split_targets(self, t: np.ndarray) -> List[np.ndarray]:
        """Reshape (N, A) unit labels into per-group (N, H_i, W_i) planes."""
        t = np.asarray(t)
        if t.ndim == 1:
            t = t[None]
        if t.shape[1] != self.num_units:
            raise InvalidInputError(f"expected {self.num_units} unit labels, got {t.shape[1]}")
        return [
            t[:, self.offsets[g] : self.offsets[g + 1]].reshape(t.shape[0], *self.group_hw[g])
            for g in range(len(self.maps))
        ]


def unit_box(rf: RFGeometry, y: int, x: int, image_hw: Tuple[int, int]) -> Box:
    y0, y1 = rf.span(y)
    x0, x1 = rf.span(x)
    h, w = image_hw
    box = Box(max(x0, 0), max(y0, 0), min(x1, w), min(y1, h))
    if box.x1 <= box.x0 or box.y1 <= box.y0:
        raise InvalidInputError("unit footprint lies entirely outside the image")
    return box


def lsd_unit_geometry(scores: ScoreMaps, unit: int) -> UnitGeometry:
    g, y, x = scores.locate(unit)
    rf = scores.geometry[g]
    return UnitGeometry(g, y, x, rf, unit_box(rf, y, x, scores.image_hw))


def anchor_array(scores: ScoreMaps) -> np.ndarray:
    """Clipped anchor boxes of every unit as an (A, 4) array of x0, y0, x1, y1."""
    h, w = scores.image_hw
    out = []
    for rf, (gh, gw) in zip(scores.geometry, scores.group_hw):
        ys = rf.start + rf.jump * np.arange(gh)
        xs = rf.start + rf.jump * np.arange(gw)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        yy, xx = yy.ravel(), xx.ravel()
        out.append(
            np.stack(
                [np.maximum(xx, 0), np.maximum(yy, 0), np.minimum(xx + rf.size, w), np.minimum(yy + rf.size, h)],
                axis=1,
            )
        )
    return np.concatenate(out).astype(np.float64)


def lsd_forward(
    h: Tensor,
    lsd: LsdSpec,
    weights: Mapping[str, Tensor],
    base_rf: RFGeometry = RFGeometry(),
    image_hw: Optional[Tuple[int, int]] = None,
    prefix: str = "lsd.",
    trace: Optional[ActivationTrace] = None,
) -> ScoreMaps:
    """Run every group on ``h``; ``base_rf`` is the footprint of one unit of ``h``."""
    if h.ndim != 4:
        raise InvalidInputError(f"expected a 4-D hidden activation, got {h.shape}")
    if image_hw is None:
        image_hw = (h.shape[2] * base_rf.jump, h.shape[3] * base_rf.jump)
    feats: List[Tensor] = []
    maps: List[Tensor] = []
    for g, src in zip(lsd.groups, lsd.group_inputs()):
        x = h if src is None else feats[src]
        for layer in g.layers:
            x = _checked(layer, x, weights, prefix, trace)
        feats.append(x)
        maps.append(_checked(g.pred, x, weights, prefix, trace))
    geometry = [rf_through(path, base_rf) for path in lsd.group_paths()]
    return ScoreMaps(maps, geometry, image_hw)


def _checked(layer: LayerSpec, x: Tensor, weights, prefix, trace) -> Tensor:
    if layer.is_conv:
        w = weights.get(f"{prefix}{layer.name}.weight")
        if w is None:
            raise InvalidInputError(f"missing weights for LSD layer {layer.name}")
        if w.shape[1] != x.shape[1]:
            raise InvalidInputError(
                f"LSD layer {layer.name} expects {w.shape[1]} channels, input has {x.shape[1]}"
            )
    return apply_layer(layer, x, weights, prefix, trace)
