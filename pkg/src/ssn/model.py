"""The full selective segmentation network: BU encoder, LSD head, TD gating and decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .anchors import LossConfig, assign_targets
from .architecture import Architecture
from .attention import AttentionSignal, init_attention
from .autodiff import Tensor
from .data import normalize
from .decoder import INPUTS, MODES, SegLevelSpec, SegState, decode, init_decoder, level_specs
from .encoder import ActivationTrace, forward_encode, init_encoder, receptive_field
from .errors import InvalidInputError
from .lsd import ScoreMaps, anchor_array, lsd_forward
from .td import ALPHA_TD, GatingTrace, td_pass

BU, LSD, SEG = "bu.", "lsd.", "seg."


@dataclass(frozen=True)
class ModelConfig:
    """Decoder and attention choices layered on top of an Architecture."""

    modulation: str = "mul"
    levels: int = 3
    inputs: str = "both"
    init: str = "threshold"
    theta_attention: float = 0.9
    alpha_td: float = ALPHA_TD
    td_kernel: int = 1

    def __post_init__(self):
        if self.modulation not in MODES:
            raise InvalidInputError(f"unknown modulation {self.modulation!r}")
        if self.inputs not in INPUTS:
            raise InvalidInputError(f"unknown decoder inputs {self.inputs!r}")
        if self.init not in ("gt", "top1", "threshold"):
            raise InvalidInputError(f"unknown init strategy {self.init!r}")
        if self.levels < 1:
            raise InvalidInputError("levels must be >= 1")


@dataclass
class ForwardResult:
    scores: ScoreMaps
    bu_trace: ActivationTrace
    lsd_trace: ActivationTrace
    signals: List[AttentionSignal] = field(default_factory=list)
    gating: List[GatingTrace] = field(default_factory=list)
    seg: Optional[SegState] = None


def init_backbone(arch: Architecture, seed: int) -> Dict[str, Tensor]:
    """Fresh BU and LSD weights."""
    net = arch.network
    params = init_encoder(net, seed, BU)
    rng = np.random.default_rng([seed, 1])
    params.update(arch.lsd.init_params(net.channels_at(net.taps["lsd"]), rng, LSD))
    return params


def init_segmentation(arch: Architecture, cfg: ModelConfig, seed: int) -> Dict[str, Tensor]:
    specs = level_specs(arch, cfg.levels, cfg.modulation, cfg.td_kernel)
    return init_decoder(specs, arch.head_channels, arch.lsd.classes, np.random.default_rng([seed, 2]), SEG)


def parameter_count(params: Dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def decays(name: str) -> bool:
    """Weight decay applies to kernels only, never to biases."""
    return name.endswith(".weight")


class SSN:
    """Parameter registry plus the forward pass for a given Architecture."""

    def __init__(self, arch: Architecture, params: Dict[str, Tensor], cfg: ModelConfig = ModelConfig()):
        if cfg.levels > arch.max_levels:
            raise InvalidInputError(f"architecture has only {arch.max_levels} decoder levels")
        self.arch = arch
        self.params = params
        self.cfg = cfg
        self.specs: List[SegLevelSpec] = level_specs(arch, cfg.levels, cfg.modulation, cfg.td_kernel)
        self._anchors: Dict[Tuple[int, int], np.ndarray] = {}

    @property
    def network(self):
        return self.arch.network

    def anchors(self, image_hw: Tuple[int, int]) -> np.ndarray:
        """(A, 4) anchor boxes for an input size (cached; they depend on geometry only)."""
        key = tuple(image_hw)
        if key not in self._anchors:
            net = self.network
            shapes = net.shapes(*key)
            tap = net.taps["lsd"]
            h = Tensor(np.zeros((1,) + shapes[tap]))
            scores = lsd_forward(h, self.arch.lsd, self.params, receptive_field(net, tap), key, LSD)
            self._anchors[key] = anchor_array(scores)
        return self._anchors[key]

    def encode(self, images: np.ndarray) -> Tuple[ScoreMaps, ActivationTrace, ActivationTrace]:
        """BU pass and LSD scores for a (N, 3, H, W) batch of [0, 255] images."""
        images = np.asarray(images)
        if images.ndim != 4:
            raise InvalidInputError(f"expected (N, 3, H, W) images, got {images.shape}")
        net = self.network
        tap = net.taps["lsd"]
        _, bu_trace = forward_encode(Tensor(normalize(images)), net, self.params, BU)
        lsd_trace = ActivationTrace()
        scores = lsd_forward(
            bu_trace.output(tap), self.arch.lsd, self.params, receptive_field(net, tap),
            images.shape[2:], LSD, lsd_trace,
        )
        return scores, bu_trace, lsd_trace

    def attention(self, scores: ScoreMaps, gt_boxes=None, loss_cfg: LossConfig = LossConfig()) -> List[AttentionSignal]:
        probs = scores.probabilities()
        k = scores.classes
        out = []
        for n in range(scores.batch):
            targets = None
            if self.cfg.init == "gt":
                if gt_boxes is None:
                    raise InvalidInputError("ground-truth initialisation needs boxes")
                targets = assign_targets(self.anchors(scores.image_hw), gt_boxes[n], loss_cfg)
            out.append(init_attention(self.cfg.init, probs[n], targets, k, self.cfg.theta_attention))
        return out

    def gate(self, signals, bu_trace, lsd_trace) -> List[GatingTrace]:
        return [
            td_pass(d, bu_trace, lsd_trace, self.network, self.arch.lsd, self.params, n, alpha=self.cfg.alpha_td,
                    bu_prefix=BU, lsd_prefix=LSD)
            for n, d in enumerate(signals)
        ]

    def forward(
        self,
        images: np.ndarray,
        gt_boxes=None,
        segment: bool = True,
        gating: Optional[List[GatingTrace]] = None,
    ) -> ForwardResult:
        """Full pass. ``gt_boxes`` (per image lists of (Box, class)) feed the GT strategy.

        Passing ``gating`` reuses earlier TD traces instead of recomputing
        attention and selection.
        """
        scores, bu_trace, lsd_trace = self.encode(images)
        res = ForwardResult(scores, bu_trace, lsd_trace)
        if not segment:
            return res
        hidden = [bu_trace.output(s.tap) for s in self.specs]
        if gating is not None:
            res.gating = list(gating)
        elif self.cfg.inputs != "bu":
            res.signals = self.attention(scores, gt_boxes)
            res.gating = self.gate(res.signals, bu_trace, lsd_trace)
        if res.gating:
            gating = [np.stack([g.get(s.tap) for g in res.gating]) for s in self.specs]
        else:
            # the BU-only ablation never reads the gating, so the TD pass is skipped
            gating = [np.zeros(h.shape) for h in hidden]
        res.seg = decode(hidden, gating, scores.maps[0], self.specs, self.params,
                         tuple(np.asarray(images).shape[2:]), self.cfg.inputs, SEG)
        return res
