"""Command line entry point: ``angioflow <stage> --config FILE --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, PipelineConfig, load_config
from .tensorfile import TensorFileError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="angioflow",
        description="Simulate rotational angiography, compute features, train and evaluate the "
                    "branch-wise concentration reconstructor.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override [global] seed (unsigned 64-bit)")
    common.add_argument("--out", default="runs/default", help="output directory (default: %(default)s)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-case stages")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    helps = {
        "generate": "generate vessel trees",
        "simulate": "simulate contrast transport per boundary-condition set",
        "project": "forward-project each case into a projection stack",
        "featurize": "compute the three-channel feature tensors",
        "train": "train the reconstructor on the train/val geometries",
        "infer": "predict concentrations for every case (or --case ids)",
        "eval": "write metric reports",
        "report": "print a digest of the metric reports",
        "run": "run generate through eval in one go",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "infer":
            p.add_argument("--case", action="append", default=None, help="case id (repeatable)")
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        print("angioflow: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = _config(args)
        if args.command == "run":
            result = pipeline.run_all(cfg, args.out, jobs=args.jobs)
            print(json.dumps(result, indent=2))
        elif args.command == "infer":
            pipeline.run_infer(cfg, args.out, jobs=args.jobs, cases=args.case)
        elif args.command == "report":
            sys.stdout.write(pipeline.run_report(cfg, args.out))
        else:
            pipeline.STAGES[args.command](cfg, args.out, jobs=args.jobs)
    except (ConfigError, pipeline.MissingArtifactError, TensorFileError, ValueError, OSError) as exc:
        print(f"angioflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
