"""SGD, checkpoints, LSD pre-training, joint multi-loss training and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .anchors import LossConfig, assign_targets, lsd_loss, sample_targets, seg_loss, total_loss
from .architecture import Architecture, format_architecture, parse_architecture
from .autodiff import Tensor, backward
from .data import PerturbSpec, Sample, eval_transform, perturb, sample_rng, train_transform
from .decoder import predict_mask
from .errors import DivergenceError, InvalidInputError
from .metrics import ConfusionAccumulator
from .model import SSN, ModelConfig, decays, init_backbone, init_segmentation

log = logging.getLogger(__name__)

MAGIC = b"SSNCKPT\x00"
VERSION = 1


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 15

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidInputError(f"invalid SGD configuration {self}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    velocities: Dict[str, np.ndarray],
    cfg: SgdConfig,
    decay: Callable[[str], bool] = decays,
) -> None:
    """In place: v = momentum * v + grad + wd * param; param -= lr * v.

    Parameters without a gradient are treated as having a zero gradient.
    Weight decay applies where ``decay(name)`` holds.
    """
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise DivergenceError(f"non-finite gradient in {', '.join(sorted(bad))}")
    for name, p in params.items():
        data = getattr(p, "data", p)
        g = grads.get(name)
        step = np.zeros_like(data) if g is None else np.array(g, dtype=np.float64)
        if g is not None and step.shape != data.shape:
            raise InvalidInputError(f"gradient shape {step.shape} != parameter shape {data.shape} for {name}")
        if decay(name) and cfg.weight_decay:
            step += cfg.weight_decay * data
        v = velocities.get(name)
        v = step if v is None else cfg.momentum * v + step
        velocities[name] = v
        data -= cfg.lr * v


# checkpoints ---------------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(_canonical(config).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    config: Dict = field(default_factory=dict)
    rng_state: Dict = field(default_factory=dict)
    history: List[Dict] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def tensors(self) -> Dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}

    def to_bytes(self) -> bytes:
        header = {
            "epoch": self.epoch,
            "config": self.config,
            "config_hash": self.config_hash,
            "rng_state": self.rng_state,
            "history": self.history,
        }
        head = _canonical(header).encode()
        out = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
        records = [("param", k, v) for k, v in sorted(self.params.items())]
        records += [("velocity", k, v) for k, v in sorted(self.velocities.items())]
        out.append(struct.pack("<I", len(records)))
        for kind, name, arr in records:
            key = f"{kind}/{name}".encode()
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out.append(struct.pack("<H", len(key)) + key)
            out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(MAGIC):
            raise InvalidInputError("not a checkpoint file")
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<II", data, pos)
        if version != VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {version}")
        pos += 8
        header = json.loads(data[pos : pos + hlen])
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {"param": {}, "velocity": {}}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            kind, name = data[pos : pos + klen].decode().split("/", 1)
            pos += klen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) * 8
            tensors[kind][name] = np.frombuffer(data[pos : pos + size], dtype="<f8").reshape(shape).copy()
            pos += size
        ck = cls(tensors["param"], tensors["velocity"], header["epoch"], header["config"], header["rng_state"],
                 header["history"])
        if ck.config_hash != header["config_hash"]:
            raise InvalidInputError("checkpoint config hash mismatch")
        return ck

    def architecture(self) -> Architecture:
        return parse_architecture(self.config["arch"])


# training loops ------------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _batches(n: int, size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for lo in range(0, n, size):
        yield order[lo : lo + size]


def _stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, list]:
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.mask for s in samples]),
        [s.boxes for s in samples],
    )


def _collect(params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    grads = {}
    for k, p in params.items():
        grads[k] = p.grad
        p.zero_grad()
    return grads


def _check_finite(loss: Tensor, what: str) -> float:
    v = loss.item()
    if not np.isfinite(v):
        raise DivergenceError(f"{what} became non-finite ({v})")
    return v


def _lsd_confusion(scores, assigned: np.ndarray, acc: ConfusionAccumulator) -> None:
    pred = scores.probabilities().argmax(axis=2)
    acc.update(pred, assigned)


def _run(
    phase: str,
    train: Sequence[Sample],
    model: SSN,
    ckpt: Checkpoint,
    sgd: SgdConfig,
    seed: int,
    loss_cfg: LossConfig,
    target: int,
    alpha_loss: float,
    on_epoch: Optional[Callable[[Dict], None]],
) -> Checkpoint:
    params = model.params
    velocities = {k: v.copy() for k, v in ckpt.velocities.items()}
    k = model.arch.lsd.classes
    segment = phase == "joint"
    for epoch in range(ckpt.epoch, sgd.epochs):
        rng = _epoch_rng(seed, epoch)
        totals = {"loss": 0.0, "lsd_loss": 0.0, "seg_loss": 0.0}
        lsd_acc = ConfusionAccumulator(k)
        steps = 0
        for b, idx in enumerate(_batches(len(train), sgd.batch_size, rng)):
            batch = [train_transform(train[i], target, sample_rng(seed, epoch * len(train) + int(i))) for i in idx]
            images, masks, boxes = _stack(batch)
            res = model.forward(images, boxes, segment=segment)
            anchors = model.anchors(images.shape[2:])
            assigned = np.stack([assign_targets(anchors, bx, loss_cfg) for bx in boxes])
            brng = np.random.default_rng([seed, epoch, b, 1])
            t = np.stack([sample_targets(a, brng, loss_cfg) for a in assigned])
            l_d = lsd_loss(res.scores, t)
            if segment:
                l_s = seg_loss(res.seg.scores, masks)
                loss = total_loss(l_d, l_s, alpha_loss)
                totals["seg_loss"] += _check_finite(l_s, "segmentation loss")
            else:
                loss = l_d
            totals["loss"] += _check_finite(loss, "loss")
            totals["lsd_loss"] += l_d.item()
            backward(loss)
            sgd_step(params, _collect(params), velocities, sgd)
            _lsd_confusion(res.scores, assigned, lsd_acc)
            steps += 1
        acc, iou = lsd_acc.scores()
        row = {"epoch": epoch + 1, **{key: v / max(steps, 1) for key, v in totals.items()}, "lsd_acc": acc, "lsd_iou": iou}
        if not segment:
            row.pop("seg_loss")
        ckpt.history.append(row)
        log.info("%s epoch %d: %s", phase, epoch + 1, row)
        if on_epoch is not None:
            on_epoch(row)
        ckpt.epoch = epoch + 1
    ckpt.params = {k: p.data.copy() for k, p in params.items()}
    ckpt.velocities = velocities
    ckpt.rng_state = _epoch_rng(seed, ckpt.epoch).bit_generator.state
    return ckpt


def pretrain_lsd(
    train: Sequence[Sample],
    arch: Architecture,
    sgd: SgdConfig = SgdConfig(),
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    target: int = 64,
    resume: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[Dict], None]] = None,
) -> Checkpoint:
    """Train BU + LSD weights against the LSD loss alone."""
    config = {
        "phase": "pretrain",
        "arch": format_architecture(arch),
        "sgd": asdict(sgd),
        "loss": asdict(loss_cfg),
        "seed": seed,
        "target": target,
        "train_size": len(train),
    }
    if resume is not None:
        _check_resume(resume, config)
        ckpt = resume
    else:
        ckpt = Checkpoint({k: p.data for k, p in init_backbone(arch, seed).items()}, config=config)
    model = SSN(arch, ckpt.tensors(), ModelConfig(levels=1))
    return _run("pretrain", train, model, ckpt, sgd, seed, loss_cfg, target, 0.0, on_epoch)


def train_multiloss(
    train: Sequence[Sample],
    pretrained: Checkpoint,
    sgd: SgdConfig = SgdConfig(epochs=30),
    model_cfg: ModelConfig = ModelConfig(),
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    target: int = 64,
    resume: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[Dict], None]] = None,
) -> Checkpoint:
    """Joint training of BU, LSD and decoder weights on L_LSD + alpha * L_seg."""
    arch = pretrained.architecture()
    config = {
        "phase": "joint",
        "arch": pretrained.config["arch"],
        "pretrained": pretrained.config_hash,
        "model": asdict(model_cfg),
        "sgd": asdict(sgd),
        "loss": asdict(loss_cfg),
        "seed": seed,
        "target": target,
        "train_size": len(train),
    }
    if resume is not None:
        _check_resume(resume, config)
        ckpt = resume
    else:
        params = dict(pretrained.params)
        params.update({k: p.data for k, p in init_segmentation(arch, model_cfg, seed).items()})
        ckpt = Checkpoint(params, config=config)
    model = SSN(arch, ckpt.tensors(), model_cfg)
    return _run("joint", train, model, ckpt, sgd, seed, loss_cfg, target, loss_cfg.alpha_loss, on_epoch)


def _check_resume(ckpt: Checkpoint, config: Dict) -> None:
    mine = {k: v for k, v in config.items() if k != "sgd"}
    theirs = {k: v for k, v in ckpt.config.items() if k != "sgd"}
    if mine != theirs:
        raise InvalidInputError("resume checkpoint was produced by a different configuration")
    ckpt.config = config


# evaluation ----------------------------------------------------------------------


def load_model(ckpt: Checkpoint, model_cfg: Optional[ModelConfig] = None) -> SSN:
    """Rebuild an SSN from a joint-training checkpoint (its own model config by default)."""
    if model_cfg is None:
        model_cfg = ModelConfig(**ckpt.config["model"])
    return SSN(ckpt.architecture(), ckpt.tensors(), model_cfg)


def predict(model: SSN, samples: Sequence[Sample], batch_size: int = 4,
            perturbation: Optional[PerturbSpec] = None) -> List[np.ndarray]:
    """Predicted (H, W) label maps; perturbations use one RNG stream per sample."""
    out = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        images = np.stack([s.image for s in chunk]).astype(np.float64)
        if perturbation is not None and perturbation.sigma > 0:
            images = np.stack([
                perturb(im, perturbation, sample_rng(perturbation.seed, lo + j)) for j, im in enumerate(images)
            ])
        res = model.forward(images, [s.boxes for s in chunk])
        out.extend(predict_mask(res.seg.scores))
    return out


def evaluate(model: SSN, samples: Sequence[Sample], batch_size: int = 4,
             perturbation: Optional[PerturbSpec] = None) -> Dict[str, float]:
    """Dataset-level mean pixel accuracy and mean IoU."""
    acc = ConfusionAccumulator(model.arch.lsd.classes)
    for pred, s in zip(predict(model, samples, batch_size, perturbation), samples):
        acc.update(pred, s.mask)
    mpa, miou = acc.scores()
    return {"mean_accuracy": mpa, "mean_iou": miou}


def prepare_eval(samples: Sequence[Sample], target: int, mean_px) -> List[Sample]:
    return [eval_transform(s, target, mean_px) for s in samples]
