"""Command-line entry point: ``mgcn {preprocess,train,eval,filters,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import data as D
from . import experiment as E
from .errors import ConfigError, DataFormatError, MGCNError

# CLI flag -> config key, for flags that map one-to-one
_FLAG_KEYS = {
    "dataset": "dataset",
    "relations": "relations",
    "fusion": "fusion",
    "khops": "khops",
    "out": "out",
    "threads": "threads",
    "data_dir": "data_dir",
    "cache_dir": "cache_dir",
    "epochs": "epochs",
    "train_limit": "train_limit",
    "test_limit": "test_limit",
    "precision": "precision",
    "workers": "workers",
    "basis": "basis",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--dataset", choices=sorted(D.RECIPES))
    common.add_argument("--relations", choices=["sp", "h", "l", "h-l", "l4", "h-l4"])
    common.add_argument("--fusion", choices=["c", "s", "cp", "pc", "all"])
    common.add_argument("--khops", type=int, metavar="K")
    common.add_argument("--basis", choices=["power", "chebyshev"])
    common.add_argument("--low-res", action="store_true", default=None, help="pixel-grid graphs")
    common.add_argument("--seed", type=int, help="single seed")
    common.add_argument("--seeds", help="comma-separated seed list")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--threads", type=int, metavar="N")
    common.add_argument("--data-dir", dest="data_dir")
    common.add_argument("--cache-dir", dest="cache_dir")
    common.add_argument("--epochs", type=int)
    common.add_argument("--train-limit", dest="train_limit", type=int)
    common.add_argument("--test-limit", dest="test_limit", type=int)
    common.add_argument("--precision", choices=["float32", "float64"])
    common.add_argument("--workers", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="mgcn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", parents=[common], help="build graph caches")
    sub.add_parser("train", parents=[common], help="train and evaluate")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", choices=["train", "test"], default="test")
    ev.add_argument("--dump-logits", metavar="PATH")
    fl = sub.add_parser("filters", parents=[common], help="export learned edge filters")
    fl.add_argument("--checkpoint", required=True)
    fl.add_argument("--resolution", type=int)
    sw = sub.add_parser("sweep", parents=[common], help="graph sparsification sweep")
    sw.add_argument("--checkpoint")
    sw.add_argument("--keep", help="comma-separated keep fractions")
    sw.add_argument("--retrain", action="store_true")
    return p


def config_from_args(args) -> E.ExperimentConfig:
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    overrides = E.ExperimentConfig.parse_pairs(pairs)
    for flag, key in _FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if args.low_res:
        overrides["low_res"] = True
    if args.seed is not None and args.seeds is not None:
        raise ConfigError("use --seed or --seeds, not both")
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.seeds is not None:
        overrides["seeds"] = E.ExperimentConfig.parse_pairs({"seeds": args.seeds})["seeds"]
    if getattr(args, "keep", None):
        overrides["keep_fractions"] = E.ExperimentConfig.parse_pairs({"keep_fractions": args.keep})["keep_fractions"]
    if getattr(args, "retrain", False):
        overrides["sweep_mode"] = "retrain"
    if getattr(args, "resolution", None):
        overrides["grid_resolution"] = args.resolution
    if args.config:
        return E.ExperimentConfig.from_file(args.config, overrides)
    return E.ExperimentConfig(**overrides)


def _run(args) -> object:
    cfg = config_from_args(args)
    if args.command == "preprocess":
        with E.threadpool_limits(cfg.threads):
            caches = E.load_caches(cfg)
        return {split: {"path": str(c.path), "records": len(c)} for split, c in caches.items()}
    if args.command == "train":
        return E.run_train(cfg)
    if args.command == "eval":
        return E.run_eval(cfg, args.checkpoint, args.split, args.dump_logits)
    if args.command == "filters":
        return E.export_edge_filters(cfg, args.checkpoint)
    if args.command == "sweep":
        return E.sparsity_sweep(cfg, args.checkpoint)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage problems with exit code 2
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(message)s",
        stream=sys.stderr,
    )
    try:
        result = _run(args)
    except MGCNError as exc:
        print(f"mgcn: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"mgcn: error: {exc}", file=sys.stderr)
        return DataFormatError.exit_code
    print(json.dumps(result, indent=1, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
