"""Line-oriented architecture config: BU layers, taps, LSD groups, decoder channels.

Example::

    input channels=3
    conv name=conv1 out=16 k=3 s=1 p=1 d=1
    relu name=relu1
    maxpool name=pool1 k=2 s=2 p=0
    tap lsd relu1
    tap level1 relu1
    stop relu1
    lsd design=parallel width=8 classes=4 pred=c1x1
    group c1x1 c1x1
    level 1 b=8 r=8 q=8
    head c=8

``format_architecture(parse_architecture(text)) == text`` for canonical text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .encoder import LayerSpec, NetworkSpec
from .errors import InvalidInputError
from .lsd import LsdSpec

SHIPPED = ("desk", "alexnet", "vgg")


@dataclass(frozen=True)
class LevelChannels:
    level: int
    b: int
    r: int
    q: int

    def __post_init__(self):
        if self.level < 1 or min(self.b, self.r, self.q) < 1:
            raise InvalidInputError(f"invalid decoder level {self}")


@dataclass
class Architecture:
    network: NetworkSpec
    lsd: LsdSpec
    levels: List[LevelChannels] = field(default_factory=list)
    head_channels: int = 8

    @property
    def max_levels(self) -> int:
        return len(self.levels)

    def level_tap(self, level: int) -> str:
        try:
            return self.network.taps[f"level{level}"]
        except KeyError:
            raise InvalidInputError(f"no tap configured for decoder level {level}") from None

    def level_channels(self, level: int) -> LevelChannels:
        for lc in self.levels:
            if lc.level == level:
                return lc
        raise InvalidInputError(f"no channel schedule for decoder level {level}")


def _kv(tokens: List[str], lineno: int) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise InvalidInputError(f"line {lineno}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k in out:
            raise InvalidInputError(f"line {lineno}: repeated key {k!r}")
        out[k] = v
    return out


def _int(kv: Dict[str, str], key: str, lineno: int, default: Optional[int] = None) -> int:
    if key not in kv:
        if default is None:
            raise InvalidInputError(f"line {lineno}: missing {key}=")
        return default
    try:
        return int(kv.pop(key))
    except ValueError:
        raise InvalidInputError(f"line {lineno}: {key} must be an integer") from None


def parse_architecture(text: str) -> Architecture:
    layers: List[LayerSpec] = []
    taps: Dict[str, str] = {}
    stop = None
    in_channels = 3
    lsd_opts: Optional[Dict[str, str]] = None
    groups: List[List[str]] = []
    levels: List[LevelChannels] = []
    head = 8
    counters = {"conv": 0, "relu": 0, "maxpool": 0}

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *rest = line.split()
        if word in ("conv", "relu", "maxpool"):
            kv = _kv(rest, lineno)
            counters[word] += 1
            name = kv.pop("name", f"{'pool' if word == 'maxpool' else word}{counters[word]}")
            if word == "relu":
                layer = LayerSpec("relu", name)
            elif word == "maxpool":
                k = _int(kv, "k", lineno)
                layer = LayerSpec("maxpool", name, 0, k, _int(kv, "s", lineno, k), _int(kv, "p", lineno, 0), 1)
            else:
                k = _int(kv, "k", lineno)
                layer = LayerSpec(
                    "collapsed" if k == 1 else "conv", name, _int(kv, "out", lineno), k,
                    _int(kv, "s", lineno, 1), _int(kv, "p", lineno, 0), _int(kv, "d", lineno, 1),
                )
            if kv:
                raise InvalidInputError(f"line {lineno}: unknown keys {sorted(kv)}")
            layers.append(layer)
        elif word == "input":
            kv = _kv(rest, lineno)
            in_channels = _int(kv, "channels", lineno)
        elif word == "tap":
            if len(rest) != 2:
                raise InvalidInputError(f"line {lineno}: expected 'tap <role> <layer>'")
            taps[rest[0]] = rest[1]
        elif word == "stop":
            if len(rest) != 1:
                raise InvalidInputError(f"line {lineno}: expected 'stop <layer>'")
            stop = rest[0]
        elif word == "lsd":
            lsd_opts = _kv(rest, lineno)
        elif word == "group":
            if not rest:
                raise InvalidInputError(f"line {lineno}: empty group")
            groups.append(rest)
        elif word == "level":
            if not rest:
                raise InvalidInputError(f"line {lineno}: missing level index")
            kv = _kv(rest[1:], lineno)
            levels.append(
                LevelChannels(int(rest[0]), _int(kv, "b", lineno), _int(kv, "r", lineno), _int(kv, "q", lineno))
            )
        elif word == "head":
            head = _int(_kv(rest, lineno), "c", lineno)
        else:
            raise InvalidInputError(f"line {lineno}: unknown directive {word!r}")

    if lsd_opts is None:
        raise InvalidInputError("missing 'lsd' directive")
    if not groups:
        raise InvalidInputError("at least one LSD group is required")
    if "lsd" not in taps:
        raise InvalidInputError("missing 'tap lsd <layer>' directive")
    network = NetworkSpec(layers, taps, stop, in_channels)
    opts = dict(lsd_opts)
    lsd = LsdSpec.from_tokens(
        groups,
        classes=_int(opts, "classes", 0),
        width=_int(opts, "width", 0),
        design=opts.pop("design", "parallel"),
        pred_token=opts.pop("pred", "c1x1"),
    )
    if opts:
        raise InvalidInputError(f"unknown lsd options {sorted(opts)}")
    if [lc.level for lc in levels] != list(range(1, len(levels) + 1)):
        raise InvalidInputError("decoder levels must be numbered 1..M in order")
    for lc in levels:
        if f"level{lc.level}" not in taps:
            raise InvalidInputError(f"decoder level {lc.level} has no tap")
    return Architecture(network, lsd, levels, head)


def format_layer(layer: LayerSpec) -> str:
    if layer.kind == "relu":
        return f"relu name={layer.name}"
    if layer.kind == "maxpool":
        return f"maxpool name={layer.name} k={layer.k} s={layer.stride} p={layer.pad}"
    return (
        f"conv name={layer.name} out={layer.out_channels} k={layer.k} "
        f"s={layer.stride} p={layer.pad} d={layer.dilation}"
    )


def _tap_order(role: str) -> Tuple[int, int, str]:
    if role == "lsd":
        return (0, 0, role)
    if role.startswith("level") and role[5:].isdigit():
        return (1, int(role[5:]), role)
    return (2, 0, role)


def format_architecture(arch: Architecture) -> str:
    net, lsd = arch.network, arch.lsd
    lines = [f"input channels={net.in_channels}"]
    lines += [format_layer(l) for l in net.layers]
    lines += [f"tap {role} {net.taps[role]}" for role in sorted(net.taps, key=_tap_order)]
    if net.stop is not None:
        lines.append(f"stop {net.stop}")
    lines.append(f"lsd design={lsd.design} width={lsd.width} classes={lsd.classes} pred={lsd.pred_token}")
    lines += ["group " + " ".join(g.tokens) for g in lsd.groups]
    lines += [f"level {lc.level} b={lc.b} r={lc.r} q={lc.q}" for lc in arch.levels]
    lines.append(f"head c={arch.head_channels}")
    return "\n".join(lines) + "\n"


def architecture_text(name_or_path: str) -> str:
    if name_or_path in SHIPPED:
        return resources.files("ssn").joinpath("configs", f"{name_or_path}.arch").read_text()
    path = Path(name_or_path)
    if not path.is_file():
        raise InvalidInputError(f"architecture config not found: {name_or_path}")
    return path.read_text()


def load_architecture(name_or_path: str) -> Architecture:
    """Load a shipped config by name (desk, alexnet, vgg) or any file path."""
    return parse_architecture(architecture_text(name_or_path))
