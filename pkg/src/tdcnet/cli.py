"""``tdcnet`` command line: make-toy, train, eval, predict.

Every TrainConfig and ModelConfig field is exposed on ``train`` as
``--field-name VALUE``; flags override values from ``--config``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import CORRUPTIONS, make_toy_dataset
from .errors import ConfigError, TDCNetError
from .harness import TrainConfig, evaluate, predict, read_config_file, train
from .model import ModelConfig

log = logging.getLogger("tdcnet")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"size must look like HxW, got {text!r}") from None
    return h, w


def _coerce(field: dataclasses.Field, text: str):
    """Turn a flag string into the field's type, using its default and annotation."""
    if text.lower() in ("none", "null") and "None" in str(field.type):
        return None
    default = field.default if field.default is not dataclasses.MISSING else None
    ann = str(field.type)
    try:
        if isinstance(default, bool) or ann == "bool":
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if field.name == "input_size":
            return parse_size(text)
        if isinstance(default, tuple) or ann.startswith("tuple"):
            items = [t for t in text.replace(" ", "").split(",") if t]
            if "str" in ann:
                return tuple(items)
            cast = float if "float" in ann else int
            return tuple(cast(t) for t in items)
        if isinstance(default, int) or ann.startswith("int"):
            return int(text)
        if isinstance(default, float) or ann.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"--{field.name.replace('_', '-')}: cannot parse {text!r} as {ann}") from None
    return text


def _config_fields() -> dict[str, dataclasses.Field]:
    out = {f.name: f for f in dataclasses.fields(ModelConfig)}
    out.update({f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"})
    return out


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    values = dict(values)
    model_table = dict(values.pop("model", None) or {})
    values.update(model_table)
    for name, f in _config_fields().items():
        raw = getattr(args, name, None)
        if raw is not None:
            values[name] = _coerce(f, raw)
    return TrainConfig.from_dict(values).validate()


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p = argparse.ArgumentParser(prog="tdcnet", description="Transparent-object depth completion.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("make-toy", parents=[common], help="write a synthetic RGB-D dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--n", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--size", default="64x64", help="HxW, both multiples of 16")
    t.add_argument("--split", default="train")
    t.add_argument("--corruption", default="background", choices=CORRUPTIONS)
    t.add_argument("--n-objects", type=int, default=3)

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--config", help="TOML or JSON file of flat key-value settings")
    tr.add_argument("--resume", help="checkpoint directory holding train_state.pt")
    for name, f in _config_fields().items():
        tr.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="VALUE",
                        help=f"{f.type}")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", required=True)
    ev.add_argument("--error-maps")
    ev.add_argument("--report", help="write the metrics JSON here as well as to stdout")
    ev.add_argument("--aggregation", default="pooled", choices=("pooled", "per_image"))
    ev.add_argument("--batch-size", type=int, default=8)

    pr = sub.add_parser("predict", parents=[common], help="complete depth for one sample directory")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--sample", required=True)
    pr.add_argument("--out", required=True)
    return p


def _make_toy(args) -> int:
    size = parse_size(args.size)
    ids = make_toy_dataset(args.out, args.n, args.seed, args.split, image_size=size,
                           corruption=args.corruption, n_objects=args.n_objects)
    print(json.dumps({"out": str(args.out), "split": args.split, "n": len(ids)}))
    return 0


def _train(args) -> int:
    cfg = build_train_config(args)
    result = train(cfg, resume=args.resume)
    last = result.run_log[-1] if len(result.run_log) else {}
    print(json.dumps({"checkpoint": str(result.checkpoint) if result.checkpoint else None,
                      "steps": result.steps, "epochs": len(result.run_log),
                      "total_loss": last.get("total_loss")}))
    return 0


def _eval(args) -> int:
    report = evaluate(args.ckpt, args.data, args.split, args.error_maps, args.aggregation,
                      args.batch_size, args.report)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _predict(args) -> int:
    pred, emap = predict(args.ckpt, args.sample, args.out)
    out = Path(args.out)
    print(json.dumps({"depth": str(out / "depth_pred.png"),
                      "error_map": str(out / "error_map.png") if emap is not None else None}))
    return 0


COMMANDS = {"make-toy": _make_toy, "train": _train, "eval": _eval, "predict": _predict}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TDCNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
