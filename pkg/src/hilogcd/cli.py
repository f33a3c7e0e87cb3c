"""``hilogcd`` command line: gen-data, train, eval.

Exit codes: 0 success, 1 I/O error, 2 configuration or usage error,
3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import synthdata
from .blob import BlobError
from .config import METHODS, ConfigError, build_run_config
from .evaluate import MethodMismatchError, evaluate_checkpoint
from .synthdata import DatasetError, GenConfig
from .trainer import CheckpointError, NonFiniteLossError, TRAINERS, atomic_write

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hilogcd", description="Domain-shifted generalized category discovery on synthetic glyphs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate and persist a synthetic dataset")
    g.add_argument("--config", help="JSON file with generator settings")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON run configuration")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--method")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the unlabelled pool")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--checkpoint", required=True, help="run directory or checkpoint.gcdt")
    e.add_argument("--out", default="-", help="report path, or - for standard output")
    e.add_argument("--method")
    e.add_argument("--no-prompts", action="store_true", help="evaluate with prompts removed")
    return p


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _apply_workers() -> None:
    n = os.environ.get("GCD_NUM_WORKERS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ConfigError(f"GCD_NUM_WORKERS must be an integer, got {n!r}") from None


def cmd_gen_data(args) -> int:
    doc = _read_json(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        try:
            doc[k] = json.loads(v)
        except json.JSONDecodeError:
            doc[k] = v
    if args.seed is not None:
        doc["seed"] = args.seed
    if "image_shape" in doc:
        doc["image_shape"] = tuple(doc["image_shape"])
    try:
        cfg = GenConfig.from_dict(doc)
        manifest, images = synthdata.make_dataset(cfg)
    except (synthdata.ConfigError, DatasetError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    synthdata.persist(manifest, images, args.out)
    counts = manifest.cell_counts()
    n_lab = sum(v for (c, d, lab), v in counts.items() if lab)
    print(f"{manifest.dataset_name}: {len(manifest.records)} records, K={manifest.K}, "
          f"{n_lab} labelled, image {tuple(manifest.image_shape)} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _read_json(args.config)
    run_cfg = build_run_config(doc, args.set, method=args.method, seed=args.seed, data=args.data, out=args.out)
    dataset = synthdata.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = TRAINERS[run_cfg.method]
    try:
        tr = train(dataset, run_cfg, out)
    except NonFiniteLossError as exc:
        atomic_write(out / "abort.json", json.dumps(exc.snapshot, indent=1).encode("utf-8"))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    last = tr.history[-1]["total"] if tr.history else float("nan")
    print(f"{run_cfg.method}: {len(tr.history)} steps, final loss {last:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = synthdata.load_dataset(args.data)
    report = evaluate_checkpoint(args.checkpoint, dataset, args.method, use_prompts=not args.no_prompts)
    text = report.to_json()
    if args.out == "-":
        sys.stdout.write(text + "\n")
    else:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write(path, text.encode("utf-8"))
        line = "  ".join(f"{k}={'n/a' if v is None else f'{v:.3f}'}" for k, v in report.headline().items())
        print(line)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "method", None) is not None and args.method not in METHODS:
            raise ConfigError(f"invalid method {args.method!r}; valid methods: {', '.join(METHODS)}")
        _apply_workers()
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, MethodMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, BlobError, DatasetError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
