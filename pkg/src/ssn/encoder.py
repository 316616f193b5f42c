"""Bottom-up feature hierarchy and its receptive-field geometry."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, conv2d, conv_output_size, maxpool2d, relu
from .errors import InvalidInputError, StateError

LAYER_KINDS = ("conv", "collapsed", "relu", "maxpool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out_channels: int = 0
    k: int = 1
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if self.kind == "collapsed" and self.k != 1:
            raise InvalidInputError(f"collapsed convolution {self.name} must have a 1x1 kernel")
        if self.kind in ("conv", "collapsed") and self.out_channels < 1:
            raise InvalidInputError(f"convolution {self.name} needs out_channels >= 1")
        if self.k < 1 or self.stride < 1 or self.pad < 0 or self.dilation < 1:
            raise InvalidInputError(f"invalid hyperparameters for layer {self.name}")

    @property
    def is_conv(self) -> bool:
        return self.kind in ("conv", "collapsed")

    @property
    def is_spatial(self) -> bool:
        return self.kind != "relu"

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        if self.kind == "relu":
            return h, w
        d = self.dilation if self.is_conv else 1
        return (
            conv_output_size(h, self.k, self.stride, self.pad, d),
            conv_output_size(w, self.k, self.stride, self.pad, d),
        )

    def output_channels(self, c: int) -> int:
        return self.out_channels if self.is_conv else c


def conv_layer(name: str, out: int, k: int = 3, s: int = 1, p: int = 0, d: int = 1) -> LayerSpec:
    return LayerSpec("collapsed" if k == 1 else "conv", name, out, k, s, p, d)


@dataclass
class NetworkSpec:
    """Ordered bottom-up layers plus named tap points and the TD stop layer."""

    layers: List[LayerSpec]
    taps: Dict[str, str] = field(default_factory=dict)
    stop: Optional[str] = None
    in_channels: int = 3

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise InvalidInputError("layer names must be unique")
        for role, layer in self.taps.items():
            if layer not in names:
                raise InvalidInputError(f"tap {role} refers to unknown layer {layer!r}")
        if self.stop is not None:
            if self.stop not in names:
                raise InvalidInputError(f"stop layer {self.stop!r} not found")
            if "lsd" in self.taps and names.index(self.stop) > names.index(self.taps["lsd"]):
                raise InvalidInputError("stop layer must not lie above the LSD tap")

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise InvalidInputError(f"unknown layer {name!r}")

    def channels_at(self, name: Optional[str]) -> int:
        c = self.in_channels
        if name is None:
            return c
        for layer in self.layers[: self.index(name) + 1]:
            c = layer.output_channels(c)
        return c

    def shapes(self, h: int, w: int) -> Dict[str, Tuple[int, int, int]]:
        """(C, H, W) of every layer output for an (h, w) input."""
        out = {}
        c = self.in_channels
        for layer in self.layers:
            h, w = layer.output_hw(h, w)
            c = layer.output_channels(c)
            if h < 1 or w < 1:
                raise InvalidInputError(f"input too small: layer {layer.name} has empty output")
            out[layer.name] = (c, h, w)
        return out


# weights -----------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    out_c, in_c, kh, kw = shape
    bound = np.sqrt(6.0 / (in_c * kh * kw + out_c * kh * kw))
    return rng.uniform(-bound, bound, size=shape)


def init_layer_params(
    layers: Iterable[LayerSpec],
    in_channels: int,
    rng: np.random.Generator,
    prefix: str = "",
    bias: bool = True,
) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    c = in_channels
    for layer in layers:
        if layer.is_conv:
            key = f"{prefix}{layer.name}"
            params[f"{key}.weight"] = Tensor(
                glorot_uniform(rng, (layer.out_channels, c, layer.k, layer.k)), requires_grad=True
            )
            if bias:
                params[f"{key}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True)
        c = layer.output_channels(c)
    return params


def init_encoder(spec: NetworkSpec, seed: int = 0, prefix: str = "") -> Dict[str, Tensor]:
    return init_layer_params(spec.layers, spec.in_channels, np.random.default_rng(seed), prefix)


# forward -------------------------------------------------------------------------


class ActivationTrace:
    """Per-layer hidden activities from a forward pass.

    ``inputs[name]`` is the tensor a layer consumed, ``outputs[name]`` the
    one it produced, and ``argmax[name]`` the pooling indices of max-pool
    layers.
    """

    def __init__(self):
        self.outputs: Dict[str, Tensor] = {}
        self.inputs: Dict[str, Tensor] = {}
        self.argmax: Dict[str, np.ndarray] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.outputs

    def __len__(self) -> int:
        return len(self.outputs)

    def names(self) -> List[str]:
        return list(self.outputs)

    def output(self, name: str) -> Tensor:
        try:
            return self.outputs[name]
        except KeyError:
            raise StateError(f"no activation recorded for layer {name!r}") from None

    def input(self, name: str) -> Tensor:
        try:
            return self.inputs[name]
        except KeyError:
            raise StateError(f"no input recorded for layer {name!r}") from None

    def pool_indices(self, name: str) -> np.ndarray:
        try:
            return self.argmax[name]
        except KeyError:
            raise StateError(f"no argmax indices recorded for pooling layer {name!r}") from None

    def update(self, other: "ActivationTrace") -> None:
        self.outputs.update(other.outputs)
        self.inputs.update(other.inputs)
        self.argmax.update(other.argmax)


def apply_layer(
    layer: LayerSpec,
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str = "",
    trace: Optional[ActivationTrace] = None,
) -> Tensor:
    if layer.is_conv:
        key = f"{prefix}{layer.name}"
        try:
            weight = params[f"{key}.weight"]
        except KeyError:
            raise InvalidInputError(f"missing weights for layer {key}") from None
        out = conv2d(x, weight, params.get(f"{key}.bias"), layer.stride, layer.pad, layer.dilation)
    elif layer.kind == "relu":
        out = relu(x)
    else:
        out, idx = maxpool2d(x, layer.k, layer.stride, layer.pad)
        if trace is not None:
            trace.argmax[layer.name] = idx
    if trace is not None:
        trace.inputs[layer.name] = x
        trace.outputs[layer.name] = out
    return out


def run_layers(
    layers: Sequence[LayerSpec],
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str = "",
    trace: Optional[ActivationTrace] = None,
) -> Tensor:
    for layer in layers:
        x = apply_layer(layer, x, params, prefix, trace)
    return x


def forward_encode(
    x: Tensor, spec: NetworkSpec, weights: Mapping[str, Tensor], prefix: str = ""
) -> Tuple[Tensor, ActivationTrace]:
    """Bottom-up pass; returns the top activation and the full trace."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise InvalidInputError(f"expected (N, {spec.in_channels}, H, W) input, got {x.shape}")
    spec.shapes(*x.shape[2:])
    trace = ActivationTrace()
    h = run_layers(spec.layers, x, weights, prefix, trace)
    return h, trace


# receptive fields ------------------------------------------------------------------


@dataclass(frozen=True)
class RFGeometry:
    """Input-space footprint of units in one layer.

    ``size`` is the side of the square footprint, ``jump`` the input-space
    distance between adjacent units, and ``start`` the input coordinate of
    the first pixel covered by unit 0 (negative when padding reaches past
    the image border).
    """

    size: int = 1
    jump: int = 1
    start: int = 0

    @property
    def offset(self) -> float:
        """Input coordinate of the centre of unit 0."""
        return self.start + (self.size - 1) / 2.0

    def span(self, index: int) -> Tuple[int, int]:
        """Half-open input interval covered by unit ``index`` along one axis."""
        first = self.start + index * self.jump
        return first, first + self.size

    def then(self, layer: LayerSpec) -> "RFGeometry":
        if not layer.is_spatial:
            return self
        d = layer.dilation if layer.is_conv else 1
        return RFGeometry(
            size=self.size + (layer.k - 1) * d * self.jump,
            jump=self.jump * layer.stride,
            start=self.start - layer.pad * self.jump,
        )


def rf_through(layers: Iterable[LayerSpec], base: RFGeometry = RFGeometry()) -> RFGeometry:
    rf = base
    for layer in layers:
        rf = rf.then(layer)
    return rf


def receptive_field(spec: NetworkSpec, layer: Optional[str] = None) -> RFGeometry:
    """Footprint of one unit of ``layer``'s output (identity for ``None``)."""
    if layer is None:
        return RFGeometry()
    return rf_through(spec.layers[: spec.index(layer) + 1])
