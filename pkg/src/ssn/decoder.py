"""Gated segmentation decoder: per-level modulation of BU features by TD gating.

Each level i turns the hidden map ``h_i`` and the gating map ``g_i`` into

    o_i = up( q( concat( r( b(bBU(h_i), bTD(g_i)) ), o_above ) ) )

where every sub-layer is a convolution followed by ReLU and ``up`` doubles
the resolution until it matches the next level. All kernels are 3x3 except
bTD, which defaults to 1x1 so that an ungated pixel is blocked exactly under
mul modulation (a 3x3 bTD leaks gating from neighbouring pixels). The gating
enters as a constant: no gradient reaches the top-down selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, add, bilinear_upsample2x, concat_channels, conv2d, mul, relu
from .encoder import glorot_uniform
from .errors import InvalidInputError

MODES = ("add", "mul", "concat")
INPUTS = ("both", "bu", "td")


@dataclass(frozen=True)
class SegLevelSpec:
    """Channel schedule of one decoder level.

    ``in_channels`` is the BU tap width (the gating map has the same shape)
    and ``above_channels`` the width of the tensor arriving from the level
    above (the LSD class count at level 1). ``td_kernel`` is the bTD
    kernel size.
    """

    level: int
    tap: str
    in_channels: int
    above_channels: int
    b: int
    r: int
    q: int
    mode: str = "mul"
    td_kernel: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown modulation mode {self.mode!r}")
        if min(self.in_channels, self.above_channels, self.b, self.r, self.q) < 1:
            raise InvalidInputError(f"decoder level {self.level} has a non-positive channel size")
        if self.td_kernel < 1 or self.td_kernel % 2 == 0:
            raise InvalidInputError("td_kernel must be a positive odd size")

    @property
    def r_in(self) -> int:
        return 2 * self.b if self.mode == "concat" else self.b


@dataclass
class SegState:
    """Per-level decoder outputs ``o_i`` and the final K-channel score map."""

    levels: List[Tensor] = field(default_factory=list)
    scores: Optional[Tensor] = None


def modulate(u: Tensor, v: Tensor, mode: str) -> Tensor:
    if mode not in MODES:
        raise InvalidInputError(f"unknown modulation mode {mode!r}")
    if mode == "concat":
        if u.shape[0] != v.shape[0] or u.shape[2:] != v.shape[2:]:
            raise InvalidInputError(f"cannot concatenate {u.shape} and {v.shape}")
        return concat_channels(u, v)
    if u.shape != v.shape:
        raise InvalidInputError(f"{mode} modulation needs equal shapes, got {u.shape} and {v.shape}")
    return add(u, v) if mode == "add" else mul(u, v)


def _conv_relu(x: Tensor, weights: Mapping[str, Tensor], key: str, bias: bool = True) -> Tensor:
    w = weights.get(f"{key}.weight")
    if w is None:
        raise InvalidInputError(f"missing decoder weights {key}")
    if w.shape[1] != x.shape[1]:
        raise InvalidInputError(f"{key} expects {w.shape[1]} channels, input has {x.shape[1]}")
    b = weights[f"{key}.bias"] if bias else None
    return relu(conv2d(x, w, b, pad=w.shape[2] // 2))


def _upsample_to(x: Tensor, hw: Tuple[int, int]) -> Tensor:
    while x.shape[2] < hw[0] or x.shape[3] < hw[1]:
        x = bilinear_upsample2x(x)
    if x.shape[2:] != tuple(hw):
        raise InvalidInputError(f"cannot reach {hw} from {x.shape[2:]} by doubling")
    return x


def modulated_features(
    h: Tensor,
    g,
    spec: SegLevelSpec,
    weights: Mapping[str, Tensor],
    inputs: str = "both",
    prefix: str = "seg.",
) -> Tensor:
    """o^b = b(bBU(h), bTD(g)); ``g`` is wrapped as a constant.

    ``inputs`` drops a branch for ablations: "bu" keeps only bBU(h), "td"
    only bTD(g). Concatenation keeps its width by zero-filling the dropped
    half.
    """
    if inputs not in INPUTS:
        raise InvalidInputError(f"unknown decoder inputs {inputs!r}")
    g = Tensor(np.asarray(getattr(g, "data", g), dtype=np.float64))
    if h.shape != g.shape:
        raise InvalidInputError(f"hidden {h.shape} and gating {g.shape} differ in shape")
    key = f"{prefix}l{spec.level}"
    u = _conv_relu(h, weights, f"{key}.bu") if inputs != "td" else None
    v = _conv_relu(g, weights, f"{key}.td", bias=False) if inputs != "bu" else None
    if inputs == "both":
        return modulate(u, v, spec.mode)
    kept = u if v is None else v
    if spec.mode == "concat":
        zeros = Tensor(np.zeros(kept.shape))
        return concat_channels(kept, zeros) if v is None else concat_channels(zeros, kept)
    return kept


def seg_layer(
    h: Tensor,
    g,
    o_above: Tensor,
    spec: SegLevelSpec,
    weights: Mapping[str, Tensor],
    out_hw: Optional[Tuple[int, int]] = None,
    inputs: str = "both",
    prefix: str = "seg.",
) -> Tensor:
    """One decoder level. ``out_hw`` defaults to twice the input resolution."""
    if o_above.shape[0] != h.shape[0] or o_above.shape[2:] != h.shape[2:]:
        raise InvalidInputError(f"level {spec.level}: o_above {o_above.shape} does not match {h.shape}")
    key = f"{prefix}l{spec.level}"
    o = _conv_relu(modulated_features(h, g, spec, weights, inputs, prefix), weights, f"{key}.r")
    o = _conv_relu(concat_channels(o, o_above), weights, f"{key}.q")
    return _upsample_to(o, out_hw or (2 * o.shape[2], 2 * o.shape[3]))


def seg_head(o0: Tensor, weights: Mapping[str, Tensor], prefix: str = "seg.") -> Tensor:
    """3x3 conv + ReLU, then a 1x1 conv to K logits."""
    x = _conv_relu(o0, weights, f"{prefix}head3")
    w, b = weights[f"{prefix}head1.weight"], weights[f"{prefix}head1.bias"]
    if w.shape[1] != x.shape[1]:
        raise InvalidInputError(f"head expects {w.shape[1]} channels, input has {x.shape[1]}")
    return conv2d(x, w, b)


def predict_mask(o) -> np.ndarray:
    """Per-pixel argmax over the class axis (lowest class on ties); (N, H, W) or (H, W)."""
    data = np.asarray(getattr(o, "data", o))
    if data.ndim not in (3, 4):
        raise InvalidInputError(f"expected (K, H, W) or (N, K, H, W) scores, got {data.shape}")
    return data.argmax(axis=-3).astype(np.uint8)


# assembly ------------------------------------------------------------------------


def level_specs(arch, levels: int, mode: str = "mul", td_kernel: int = 1) -> List[SegLevelSpec]:
    """Specs for the top ``levels`` decoder levels of an Architecture."""
    if not 1 <= levels <= arch.max_levels:
        raise InvalidInputError(f"levels must lie in 1..{arch.max_levels}, got {levels}")
    specs = []
    above = arch.lsd.classes
    for i in range(1, levels + 1):
        lc = arch.level_channels(i)
        tap = arch.level_tap(i)
        specs.append(SegLevelSpec(i, tap, arch.network.channels_at(tap), above, lc.b, lc.r, lc.q, mode, td_kernel))
        above = lc.q
    return specs


def init_decoder(
    specs: Sequence[SegLevelSpec],
    head_channels: int,
    classes: int,
    rng: np.random.Generator,
    prefix: str = "seg.",
) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}

    def conv(key, out_c, in_c, k, bias=True):
        params[f"{prefix}{key}.weight"] = Tensor(glorot_uniform(rng, (out_c, in_c, k, k)), requires_grad=True)
        if bias:
            params[f"{prefix}{key}.bias"] = Tensor(np.zeros(out_c), requires_grad=True)

    for s in specs:
        conv(f"l{s.level}.bu", s.b, s.in_channels, 3)
        conv(f"l{s.level}.td", s.b, s.in_channels, s.td_kernel, bias=False)
        conv(f"l{s.level}.r", s.r, s.r_in, 3)
        conv(f"l{s.level}.q", s.q, s.r + s.above_channels, 3)
    conv("head3", head_channels, specs[-1].q, 3)
    conv("head1", classes, head_channels, 1)
    return params


def decode(
    hidden: Sequence[Tensor],
    gating: Sequence,
    lsd_scores: Tensor,
    specs: Sequence[SegLevelSpec],
    weights: Mapping[str, Tensor],
    image_hw: Tuple[int, int],
    inputs: str = "both",
    prefix: str = "seg.",
) -> SegState:
    """Run all levels then the head.

    ``hidden[i]``/``gating[i]`` feed level i+1; ``lsd_scores`` is the
    first LSD group's score map, concatenated at level 1. Each level is
    upsampled to the next level's resolution, the last one to ``image_hw``.
    """
    if not (len(hidden) == len(gating) == len(specs)):
        raise InvalidInputError("need one hidden and one gating map per decoder level")
    state = SegState()
    o = lsd_scores
    for i, spec in enumerate(specs):
        target = tuple(hidden[i + 1].shape[2:]) if i + 1 < len(specs) else tuple(image_hw)
        o = seg_layer(hidden[i], gating[i], o, spec, weights, target, inputs, prefix)
        state.levels.append(o)
    state.scores = seg_head(o, weights, prefix)
    return state
