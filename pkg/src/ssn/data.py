"""Synthetic shape data, resize/crop/pad transforms, perturbations and on-disk I/O.

Images are (3, H, W) uint8 arrays, masks (H, W) uint8 with 255 as the
don't-care label, boxes are half-open pixel boxes paired with a class.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .anchors import Box
from .errors import InvalidInputError

IGNORE = 255
SHAPES = ("circle", "square", "triangle")  # classes 1, 2, 3
MIN_CANVAS = 16
PERTURB_KINDS = ("uniform", "salt-pepper", "box-occlusion")


@dataclass
class Sample:
    image: np.ndarray
    boxes: List[Tuple[Box, int]] = field(default_factory=list)
    mask: Optional[np.ndarray] = None

    @property
    def hw(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, index), so results never depend on processing order."""
    return np.random.default_rng([int(seed), int(index)])


# synthetic data ------------------------------------------------------------------


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "circle":
        c = size / 2.0
        return (yy - c) ** 2 + (xx - c) ** 2 <= c * c
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    # isosceles triangle, apex up or down
    up = rng.random() < 0.5
    t = yy / size if up else 1.0 - yy / size
    return np.abs(xx - size / 2.0) <= t * size / 2.0


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = rng.uniform(40, 200, size=3)
    gy, gx = rng.uniform(-40, 40, size=2)
    ramp = gy * np.linspace(-0.5, 0.5, h)[:, None] + gx * np.linspace(-0.5, 0.5, w)[None, :]
    coarse = rng.normal(0, 12, size=(3, h // 8 + 2, w // 8 + 2))
    coarse = np.repeat(np.repeat(coarse, 8, axis=1), 8, axis=2)[:, :h, :w]
    fine = rng.normal(0, 8, size=(3, h, w))
    return base[:, None, None] + ramp[None] + coarse + fine


def tight_box(region: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(region)
    if len(ys) == 0:
        return None
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def synth_sample(rng: np.random.Generator, canvas: int, k: int = 4) -> Sample:
    img = _background(rng, canvas, canvas)
    mask = np.zeros((canvas, canvas), dtype=np.uint8)
    taken = np.zeros((canvas, canvas), dtype=bool)
    boxes: List[Tuple[Box, int]] = []
    want = int(rng.integers(1, 4))
    lo, hi = max(4, canvas // 8), max(5, canvas // 2)
    for _ in range(50):
        if len(boxes) == want:
            break
        cls = int(rng.integers(1, k))
        size = int(rng.integers(lo, hi + 1))
        y0, x0 = (int(v) for v in rng.integers(0, canvas - size + 1, size=2))
        # keep a 2 px gap between instances so boxes never overlap
        if taken[max(0, y0 - 2) : y0 + size + 2, max(0, x0 - 2) : x0 + size + 2].any():
            continue
        shape = _shape_mask(SHAPES[(cls - 1) % len(SHAPES)], size, rng)
        region = np.zeros_like(taken)
        region[y0 : y0 + size, x0 : x0 + size] = shape
        colour = rng.uniform(0, 255, size=3)
        shade = rng.normal(0, 6, size=(3, canvas, canvas))
        img = np.where(region[None], colour[:, None, None] + shade, img)
        mask[region] = cls
        taken[y0 : y0 + size, x0 : x0 + size] = True
        boxes.append((tight_box(region), cls))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(image, boxes, mask)


def synth_generate(seed: int, n: int, canvas: int = 64, k: int = 4) -> List[Sample]:
    """``n`` images of 1 to 3 non-overlapping filled shapes on a textured background."""
    if k < 2:
        raise InvalidInputError("need at least one foreground class (K >= 2)")
    if k - 1 > len(SHAPES):
        raise InvalidInputError(f"only {len(SHAPES)} shape classes are available")
    if canvas < MIN_CANVAS:
        raise InvalidInputError(f"canvas must be at least {MIN_CANVAS} px")
    if n < 0:
        raise InvalidInputError("n must be non-negative")
    return [synth_sample(sample_rng(seed, i), canvas, k) for i in range(n)]


# transforms ------------------------------------------------------------------------


def _bilinear_weights(src: int, dst: int):
    pos = (np.arange(dst) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0, src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, pos - i0


def resize_image(image: np.ndarray, hw: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-centre sampling; returns uint8."""
    h, w = hw
    y0, y1, fy = _bilinear_weights(image.shape[1], h)
    x0, x1, fx = _bilinear_weights(image.shape[2], w)
    im = image.astype(np.float64)
    top = im[:, y0][:, :, x0] * (1 - fx) + im[:, y0][:, :, x1] * fx
    bot = im[:, y1][:, :, x0] * (1 - fx) + im[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_mask(mask: np.ndarray, hw: Tuple[int, int]) -> np.ndarray:
    h, w = hw
    ys = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(int), mask.shape[0] - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(int), mask.shape[1] - 1)
    return mask[ys][:, xs]


def _refit_boxes(boxes, mask, sy: float, sx: float, dy: int, dx: int) -> List[Tuple[Box, int]]:
    """Map boxes through scale + shift, then tighten each to its class pixels in ``mask``."""
    h, w = mask.shape
    out = []
    for b, c in boxes:
        y0 = max(int(np.floor(b.y0 * sy)) - dy - 1, 0)
        x0 = max(int(np.floor(b.x0 * sx)) - dx - 1, 0)
        y1 = min(int(np.ceil(b.y1 * sy)) - dy + 1, h)
        x1 = min(int(np.ceil(b.x1 * sx)) - dx + 1, w)
        if y1 <= y0 or x1 <= x0:
            continue
        region = np.zeros((h, w), dtype=bool)
        region[y0:y1, x0:x1] = mask[y0:y1, x0:x1] == c
        tb = tight_box(region)
        if tb is not None:
            out.append((tb, c))
    return out


def _resized(s: Sample, hw: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray, float, float]:
    h, w = s.hw
    return resize_image(s.image, hw), resize_mask(s.mask, hw), hw[0] / h, hw[1] / w


def train_transform(s: Sample, target: int, rng: Union[int, np.random.Generator]) -> Sample:
    """Resize the smaller side to ``target`` then take a random target x target crop."""
    rng = np.random.default_rng(rng)
    h, w = s.hw
    scale = target / min(h, w)
    hw = (max(target, int(round(h * scale))), max(target, int(round(w * scale))))
    img, mask, sy, sx = _resized(s, hw)
    dy = int(rng.integers(0, hw[0] - target + 1))
    dx = int(rng.integers(0, hw[1] - target + 1))
    mask = mask[dy : dy + target, dx : dx + target]
    boxes = _refit_boxes(s.boxes, mask, sy, sx, dy, dx)
    return Sample(np.ascontiguousarray(img[:, dy : dy + target, dx : dx + target]), boxes, np.ascontiguousarray(mask))


def eval_transform(s: Sample, target: int, mean_pixel: Sequence[int] = (0, 0, 0)) -> Sample:
    """Resize the larger side to ``target``; pad bottom/right to a square with the mean pixel and 255."""
    h, w = s.hw
    scale = target / max(h, w)
    hw = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    img, mask, sy, sx = _resized(s, hw)
    out = np.empty((3, target, target), dtype=np.uint8)
    out[:] = np.asarray(mean_pixel, dtype=np.uint8)[:, None, None]
    out[:, : hw[0], : hw[1]] = img
    full = np.full((target, target), IGNORE, dtype=np.uint8)
    full[: hw[0], : hw[1]] = mask
    boxes = _refit_boxes(s.boxes, full, sy, sx, 0, 0)
    return Sample(out, boxes, full)


def mean_pixel(samples: Sequence[Sample]) -> Tuple[int, int, int]:
    total = np.zeros(3)
    count = 0
    for s in samples:
        total += s.image.reshape(3, -1).sum(axis=1)
        count += s.image.shape[1] * s.image.shape[2]
    if count == 0:
        return (0, 0, 0)
    return tuple(int(v) for v in np.rint(total / count))


def normalize(image: np.ndarray) -> np.ndarray:
    """Map [0, 255] pixel values to [-1, 1] for the network input."""
    return np.asarray(image, dtype=np.float64) / 127.5 - 1.0


# perturbations -------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURB_KINDS:
            raise InvalidInputError(f"unknown perturbation {self.kind!r}")
        if not 0.0 <= self.sigma <= 1.0:
            raise InvalidInputError("sigma must lie in [0, 1]")


def perturb(x: np.ndarray, spec: PerturbSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Perturbed copy of a (3, H, W) image as float64 in [0, 255]."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    x = np.array(x, dtype=np.float64)
    _, h, w = x.shape
    if spec.sigma == 0:
        return x
    if spec.kind == "uniform":
        half = 255.0 * spec.sigma / 2.0
        return np.clip(x + rng.uniform(-half, half, size=x.shape), 0.0, 255.0)
    if spec.kind == "salt-pepper":
        hit = rng.random((h, w)) < spec.sigma
        salt = rng.random((h, w)) < 0.5
        x[:, hit] = np.where(salt[hit], 255.0, 0.0)
        return x
    side = int(np.floor(spec.sigma * min(h, w)))
    if side > 0:
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        x[:, y0 : y0 + side, x0 : x0 + side] = 0.0
    return x


# disk format -------------------------------------------------------------------


def _netpbm_bytes(magic: bytes, array: np.ndarray) -> bytes:
    h, w = array.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(array, dtype=np.uint8).tobytes()


def encode_ppm(image: np.ndarray) -> bytes:
    return _netpbm_bytes(b"P6", np.transpose(image, (1, 2, 0)))


def encode_pgm(mask: np.ndarray) -> bytes:
    return _netpbm_bytes(b"P5", mask)


def _parse_netpbm(data: bytes, magic: bytes) -> Tuple[int, int, bytes]:
    if not data.startswith(magic):
        raise InvalidInputError(f"not a {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    w, h, maxval = fields
    if maxval != 255:
        raise InvalidInputError("only 8-bit netpbm files are supported")
    return w, h, data[pos + 1 :]


def decode_ppm(data: bytes) -> np.ndarray:
    w, h, raw = _parse_netpbm(data, b"P6")
    return np.frombuffer(raw[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, raw = _parse_netpbm(data, b"P5")
    return np.frombuffer(raw[: w * h], dtype=np.uint8).reshape(h, w).copy()


def atomic_write(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def boxes_csv(samples: Sequence[Sample]) -> bytes:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["index", "x0", "y0", "x1", "y1", "class"])
    for i, s in enumerate(samples):
        for b, c in s.boxes:
            wr.writerow([i, _num(b.x0), _num(b.y0), _num(b.x1), _num(b.y1), c])
    return buf.getvalue().encode()


def write_split(samples: Sequence[Sample], directory: Union[str, Path]) -> None:
    d = Path(directory)
    for i, s in enumerate(samples):
        atomic_write(d / "images" / f"{i:05d}.ppm", encode_ppm(s.image))
        atomic_write(d / "masks" / f"{i:05d}.pgm", encode_pgm(s.mask))
    atomic_write(d / "boxes.csv", boxes_csv(samples))


def read_split(directory: Union[str, Path]) -> List[Sample]:
    d = Path(directory)
    if not (d / "boxes.csv").exists():
        raise InvalidInputError(f"{d} is not a dataset split (boxes.csv missing)")
    images = sorted((d / "images").glob("*.ppm"))
    samples = [
        Sample(decode_ppm(p.read_bytes()), [], decode_pgm((d / "masks" / f"{p.stem}.pgm").read_bytes()))
        for p in images
    ]
    with open(d / "boxes.csv", newline="") as f:
        for row in csv.DictReader(f):
            box = Box(*(float(row[k]) for k in ("x0", "y0", "x1", "y1")))
            samples[int(row["index"])].boxes.append((box, int(row["class"])))
    return samples
