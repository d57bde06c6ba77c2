"""Command line entry point.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import logging
import os
import sys

from . import synthetic
from .pipeline import (
    CaptionPipeline,
    PipelineConfig,
    bench,
    train_confidence_stage,
    train_dmsm_stage,
    train_lm_stage,
    train_vision_stage,
    write_gallery,
)
from .service import decode_png, serve
from .tensor.serialize import load_tensor


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="pipeline config JSON (default: $CAPTION_FORGE_CONFIG)")
    parser.add_argument("--seed", type=int, default=default, help="random seed")


def build_parser():
    parser = _Parser(prog="caption-forge", description="Desk-scale image captioning pipeline.")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--entity-rate", type=float, default=0.2)

    for name, extra in (
        ("train-vision", ("--epochs",)),
        ("train-lm", ()),
        ("train-dmsm", ("--epochs",)),
        ("train-confidence", ("--n",)),
    ):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')} model(s)")
        p.add_argument("--data", required=True, help="corpus directory written by gen-data")
        for flag in extra:
            p.add_argument(flag, type=int)

    p = sub.add_parser("caption", parents=[common], help="caption one image (PNG or .cftn)")
    p.add_argument("image")

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)

    p = sub.add_parser("bench", parents=[common], help="latency report")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--multi-thread", action="store_true", help="allow multi-threaded BLAS")
    return parser


def _config_path(args):
    return args.config or os.environ.get("CAPTION_FORGE_CONFIG") or "caption_forge.json"


def _load_image(path):
    if path.endswith(".cftn"):
        return load_tensor(path)
    with open(path, "rb") as fh:
        return decode_png(fh.read())


def run(args):
    cfg_path = _config_path(args)
    config = PipelineConfig.resolve(cfg_path)
    seed = args.seed
    log = lambda msg: print(msg, file=sys.stderr)  # noqa: E731

    if args.command == "gen-data":
        examples = synthetic.generate_corpus(7 if seed is None else seed, args.n, args.entity_rate)
        synthetic.save_corpus(examples, args.out)
        log(f"wrote {len(examples)} examples to {args.out}")
        return 0

    if args.command.startswith("train-"):
        examples = synthetic.load_corpus(args.data)
        seed = seed or 0
        os.makedirs(config.base_dir, exist_ok=True)
        if args.command == "train-vision":
            train_vision_stage(examples, config, seed, log, **({"epochs": args.epochs} if args.epochs else {}))
        elif args.command == "train-lm":
            train_lm_stage(examples, config, log)
        elif args.command == "train-dmsm":
            train_dmsm_stage(examples, config, seed, log, **({"epochs": args.epochs} if args.epochs else {}))
        else:
            train_confidence_stage(examples[: args.n or 600], config, seed, log)
            if not os.path.exists(config.path("gallery")):
                write_gallery(config)
        if not os.path.exists(cfg_path):
            config.save(cfg_path)
        return 0

    pipeline = CaptionPipeline.from_config(config)
    if args.command == "caption":
        result = pipeline.caption(_load_image(args.image))
        print(json.dumps(result.to_json()))
    elif args.command == "serve":
        logging.basicConfig(level=logging.INFO)
        serve(pipeline, args.host, args.port)
    elif args.command == "bench":
        report = bench(pipeline, args.n, args.warmup, seed=123 if seed is None else seed, single_thread=not args.multi_thread)
        print(json.dumps(report, indent=2))
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return run(args)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
