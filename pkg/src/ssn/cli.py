"""Command-line entry point: ``ssn <command> [flags]``.

Every command writes a ``config.json`` snapshot next to its outputs;
``ssn rerun <config.json>`` replays it. Relative ``--out`` paths resolve
against ``$SSN_OUTPUT_ROOT`` (default: the working directory).

Exit codes: 0 ok, 1 configuration or input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .anchors import LossConfig
from .architecture import load_architecture
from .data import (
    PERTURB_KINDS,
    PerturbSpec,
    Sample,
    atomic_write,
    encode_pgm,
    mean_pixel,
    read_split,
    synth_generate,
    write_split,
)
from .errors import InvalidInputError
from .metrics import ConfusionAccumulator
from .model import ModelConfig
from .training import (
    Checkpoint,
    SgdConfig,
    load_model,
    predict,
    prepare_eval,
    pretrain_lsd,
    train_multiloss,
)

log = logging.getLogger("ssn")

OUTPUT_ROOT_ENV = "SSN_OUTPUT_ROOT"
SIGMA_GRID = (0.0, 0.25, 0.45, 0.65)
CONFIG_FILE = "config.json"


class ConfigError(Exception):
    """Bad flags or an unusable config snapshot (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# output helpers ------------------------------------------------------------------


def output_dir(out: str) -> Path:
    p = Path(out)
    if not p.is_absolute():
        p = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_bytes(header: Sequence[str], rows: Sequence[Dict]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row.get(h, "")) for h in header])
    return buf.getvalue().encode()


def write_snapshot(out: Path, config: Dict) -> None:
    atomic_write(out / CONFIG_FILE, (json.dumps(config, sort_keys=True, indent=2) + "\n").encode())


def _read_checkpoint(path: str) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise InvalidInputError(f"cannot read checkpoint {path}: {e.strerror}") from e
    return Checkpoint.from_bytes(data)


def _write_checkpoint(path: Path, ck: Checkpoint) -> None:
    atomic_write(path, ck.to_bytes())


def _load_split(path: str) -> List[Sample]:
    return read_split(path)


# commands ------------------------------------------------------------------------


def cmd_synth(cfg: Dict, out: Path) -> None:
    samples = synth_generate(cfg["seed"], cfg["n"], cfg["canvas"], cfg["classes"])
    write_split(samples, out)


HISTORY_COLUMNS = ["epoch", "loss", "lsd_loss", "seg_loss", "lsd_acc", "lsd_iou"]


def cmd_pretrain(cfg: Dict, out: Path) -> None:
    arch = load_architecture(cfg["arch"])
    train = _load_split(cfg["data"])
    resume = _read_checkpoint(cfg["resume"]) if cfg.get("resume") else None
    ck = pretrain_lsd(train, arch, _sgd(cfg), cfg["seed"], _loss(cfg), cfg["target"], resume)
    _write_checkpoint(out / "checkpoint.ckpt", ck)
    atomic_write(out / "metrics.csv", csv_bytes([c for c in HISTORY_COLUMNS if c != "seg_loss"], ck.history))


def cmd_train(cfg: Dict, out: Path) -> None:
    train = _load_split(cfg["data"])
    pretrained = _read_checkpoint(cfg["pretrained"])
    resume = _read_checkpoint(cfg["resume"]) if cfg.get("resume") else None
    ck = train_multiloss(train, pretrained, _sgd(cfg), _model(cfg), cfg["seed"], _loss(cfg), cfg["target"], resume)
    _write_checkpoint(out / "checkpoint.ckpt", ck)
    atomic_write(out / "metrics.csv", csv_bytes(HISTORY_COLUMNS, ck.history))


def _eval_samples(cfg: Dict) -> List[Sample]:
    samples = _load_split(cfg["data"])
    return prepare_eval(samples, cfg["target"], mean_pixel(samples))


def _predictor(cfg: Dict) -> Callable[[List[Sample], Optional[PerturbSpec]], List[np.ndarray]]:
    if cfg["predictor"] == "oracle":
        # reference stub: returns the ground truth with don't-care pixels as background
        return lambda samples, pert=None: [np.where(s.mask == 255, 0, s.mask).astype(np.uint8) for s in samples]
    model = load_model(_read_checkpoint(cfg["checkpoint"]))
    return lambda samples, pert=None: predict(model, samples, cfg["batch_size"], pert)


def _scores(preds, samples, k: int) -> Dict[str, float]:
    acc = ConfusionAccumulator(k)
    for p, s in zip(preds, samples):
        acc.update(p, s.mask)
    mpa, miou = acc.scores()
    return {"mean_accuracy": mpa, "mean_iou": miou}


def _classes(samples: Sequence[Sample], cfg: Dict) -> int:
    if cfg["predictor"] == "model":
        return _read_checkpoint(cfg["checkpoint"]).architecture().lsd.classes
    return cfg["classes"]


def cmd_eval(cfg: Dict, out: Path) -> None:
    samples = _eval_samples(cfg)
    preds = _predictor(cfg)(samples, None)
    row = {"n": len(samples), **_scores(preds, samples, _classes(samples, cfg))}
    for i, p in enumerate(preds):
        atomic_write(out / "masks" / f"{i:05d}.pgm", encode_pgm(p))
    atomic_write(out / "metrics.csv", csv_bytes(["n", "mean_accuracy", "mean_iou"], [row]))


def cmd_perturb(cfg: Dict, out: Path) -> None:
    samples = _eval_samples(cfg)
    run = _predictor(cfg)
    k = _classes(samples, cfg)
    clean = _scores(run(samples, None), samples, k)
    rows = []
    for kind in cfg["kinds"]:
        for sigma in cfg["sigmas"]:
            spec = PerturbSpec(kind, sigma, cfg["seed"])
            r = clean if sigma == 0 else _scores(run(samples, spec), samples, k)
            rows.append({"kind": kind, "sigma": sigma, **r, "iou_drop": clean["mean_iou"] - r["mean_iou"]})
    header = ["kind", "sigma", "mean_accuracy", "mean_iou", "iou_drop"]
    atomic_write(out / "degradation.csv", csv_bytes(header, rows))


def cmd_ablate(cfg: Dict, out: Path) -> None:
    train = _load_split(cfg["data"])
    val_raw = _load_split(cfg["val"])
    val = prepare_eval(val_raw, cfg["target"], mean_pixel(val_raw))
    pretrained = _read_checkpoint(cfg["pretrained"])
    rows = []
    for init in cfg["inits"]:
        for mod in cfg["modulations"]:
            for levels in cfg["levels"]:
                for inputs in cfg["inputs"]:
                    mc = ModelConfig(modulation=mod, levels=levels, inputs=inputs, init=init,
                                     theta_attention=cfg["theta"], td_kernel=cfg["td_kernel"])
                    name = f"{init}-{mod}-M{levels}-{inputs}"
                    log.info("ablation variant %s", name)
                    ck = train_multiloss(train, pretrained, _sgd(cfg), mc, cfg["seed"], _loss(cfg), cfg["target"])
                    _write_checkpoint(out / "variants" / f"{name}.ckpt", ck)
                    preds = predict(load_model(ck), val, cfg["batch_size"])
                    r = _scores(preds, val, ck.architecture().lsd.classes)
                    rows.append({"init": init, "modulation": mod, "levels": levels, "inputs": inputs, **r})
    header = ["init", "modulation", "levels", "inputs", "mean_accuracy", "mean_iou"]
    atomic_write(out / "ablation.csv", csv_bytes(header, rows))


def cmd_gate_dump(cfg: Dict, out: Path) -> None:
    samples = _eval_samples(cfg)
    if not 0 <= cfg["index"] < len(samples):
        raise InvalidInputError(f"sample index {cfg['index']} out of range 0..{len(samples) - 1}")
    s = samples[cfg["index"]]
    ck = _read_checkpoint(cfg["checkpoint"])
    model_cfg = ModelConfig(**{**ck.config["model"], "init": cfg["init"], "inputs": "both"})
    model = load_model(ck, model_cfg)
    res = model.forward(s.image[None].astype(np.float64), [s.boxes])
    gating = res.gating[0]
    rows = []
    for layer in sorted(gating.maps):
        m = gating.get(layer).sum(axis=0)
        peak = float(m.max())
        img = np.zeros(m.shape, np.uint8) if peak == 0 else np.round(255 * m / peak).astype(np.uint8)
        atomic_write(out / f"gate_{layer}.pgm", encode_pgm(img))
        rows.append({"layer": layer, "height": m.shape[0], "width": m.shape[1], "mass": float(m.sum()), "peak": peak})
    atomic_write(out / "gating.csv", csv_bytes(["layer", "height", "width", "mass", "peak"], rows))
    atomic_write(out / "attention.csv", csv_bytes(["unit", "class"], [
        {"unit": u, "class": c} for u, c in res.signals[0].active
    ]))


COMMANDS: Dict[str, Callable[[Dict, Path], None]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "ablate": cmd_ablate,
    "gate-dump": cmd_gate_dump,
}


# config --------------------------------------------------------------------------


def _sgd(cfg: Dict) -> SgdConfig:
    return SgdConfig(lr=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                     batch_size=cfg["batch_size"], epochs=cfg["epochs"])


def _loss(cfg: Dict) -> LossConfig:
    return LossConfig(alpha_loss=cfg["alpha_loss"])


def _model(cfg: Dict) -> ModelConfig:
    return ModelConfig(modulation=cfg["modulation"], levels=cfg["levels"], inputs=cfg["inputs"],
                       init=cfg["init"], theta_attention=cfg["theta"], td_kernel=cfg["td_kernel"])


def _csv_list(kind: Callable, choices: Optional[Sequence] = None):
    def parse(text: str):
        items = [kind(t) for t in text.split(",") if t]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        bad = [t for t in items if choices is not None and t not in choices]
        if bad:
            raise argparse.ArgumentTypeError(f"invalid choice(s) {bad}; expected {list(choices)}")
        return items

    return parse


def _add_sgd(p, epochs: int, lr: float) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--alpha-loss", type=float, default=1.0)


def _add_model(p) -> None:
    p.add_argument("--init", choices=["gt", "top1", "threshold"], default="threshold")
    p.add_argument("--theta", type=float, default=0.9, help="attention threshold for the threshold strategy")
    p.add_argument("--modulation", choices=["add", "mul", "concat"], default="mul")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--inputs", choices=["both", "bu", "td"], default="both")
    p.add_argument("--td-kernel", type=int, default=1, help="bTD kernel size (3 leaks gating across pixels)")


def _add_eval(p) -> None:
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--checkpoint", help="joint-training checkpoint")
    p.add_argument("--predictor", choices=["model", "oracle"], default="model")
    p.add_argument("--classes", type=int, default=4, help="class count for the oracle predictor")
    p.add_argument("--target", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssn", description="Selective segmentation network experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help=f"output directory (relative to ${OUTPUT_ROOT_ENV})")
        return p

    p = command("synth", "generate a synthetic split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)

    p = command("pretrain", "train BU and LSD weights on the LSD loss")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="desk", help="bundled name or path to an .arch file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=int, default=64)
    p.add_argument("--resume")
    _add_sgd(p, 15, 3e-2)

    p = command("train", "joint multi-loss training from a pretrained checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=int, default=64)
    p.add_argument("--resume")
    _add_sgd(p, 30, 3e-2)
    _add_model(p)

    p = command("eval", "metrics and predicted masks on a split")
    _add_eval(p)

    p = command("perturb", "metric degradation over a noise grid")
    _add_eval(p)
    p.add_argument("--kinds", type=_csv_list(str, PERTURB_KINDS), default=list(PERTURB_KINDS))
    p.add_argument("--sigmas", type=_csv_list(float), default=list(SIGMA_GRID))
    p.add_argument("--seed", type=int, default=0)

    p = command("ablate", "train and score a grid of decoder variants")
    p.add_argument("--data", required=True, help="training split")
    p.add_argument("--val", required=True, help="validation split")
    p.add_argument("--pretrained", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=int, default=64)
    p.add_argument("--theta", type=float, default=0.9)
    p.add_argument("--td-kernel", type=int, default=1)
    p.add_argument("--inits", type=_csv_list(str, ["gt", "top1", "threshold"]), default=["gt", "top1", "threshold"])
    p.add_argument("--modulations", type=_csv_list(str, ["add", "mul", "concat"]), default=["add", "mul", "concat"])
    p.add_argument("--levels", type=_csv_list(int, [1, 2, 3]), default=[1, 2, 3])
    p.add_argument("--inputs", type=_csv_list(str, ["both", "bu", "td"]), default=["both", "bu", "td"])
    _add_sgd(p, 30, 3e-2)

    p = command("gate-dump", "per-layer gating maps for one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--init", choices=["gt", "top1", "threshold"], default="top1")
    p.add_argument("--target", type=int, default=64)

    p = sub.add_parser("rerun", help="replay a config.json snapshot")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (defaults to the snapshot's directory)")
    return parser


def _snapshot(args: argparse.Namespace) -> Dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("out", "verbose")}
    if cfg["command"] == "gate-dump":
        cfg["predictor"] = "model"
    return cfg


def execute(cfg: Dict, out: Path) -> None:
    if cfg.get("command") not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.get('command')!r}")
    write_snapshot(out, cfg)
    COMMANDS[cfg["command"]](cfg, out)


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "rerun":
            path = Path(args.config)
            try:
                cfg = json.loads(path.read_text())
            except (OSError, ValueError) as e:
                raise ConfigError(f"cannot load config snapshot {path}: {e}") from e
            out = output_dir(args.out) if args.out else path.parent
        else:
            cfg = _snapshot(args)
            out = output_dir(args.out)
        if cfg.get("predictor") == "model" and cfg.get("command") in ("eval", "perturb") and not cfg.get("checkpoint"):
            raise ConfigError("--checkpoint is required with the model predictor")
        execute(cfg, out)
    except (ConfigError, InvalidInputError, KeyError) as e:
        print(f"ssn: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit status 2
        print(f"ssn: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
